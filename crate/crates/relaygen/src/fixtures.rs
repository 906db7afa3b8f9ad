//! Deterministic fixture builders: planted-margin calibration corpora,
//! scripted two-model sessions, and delegation pair sets.
//!
//! Everything here is seeded and reproducible, which is what makes
//! GPU-free end-to-end testing (and the demo flow in the README)
//! possible. Fixtures are ordinary library code so the CLI integration
//! tests and the acceptance suite can share them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::mocksim::{Script, ScriptToken};
use crate::switcher::THINK_END;
use crate::trace::{Trace, TokenRecord};

/// Cues planted to lead into high-margin (easy) continuations.
pub const EASY_CUES: [&str; 3] = ["thus", "therefore", "now"];
/// Cues planted to lead into low-margin (hard) continuations.
pub const HARD_CUES: [&str; 3] = ["wait", "hmm", "maybe"];

const FILLERS: [&str; 8] = [
    "alpha", "beta", "gamma", "delta", "sigma", "kappa", "lambda", "omega",
];

fn capitalized(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

fn margin_token(text: &str, margin: f64) -> TokenRecord {
    TokenRecord::new(
        text,
        vec![
            (text.to_string(), 0.5 + margin / 2.0),
            ("<alt>".to_string(), 0.5 - margin / 2.0),
        ],
        0,
    )
}

/// A calibration corpus with margins planted so that exactly
/// [`EASY_CUES`] clear the selection threshold: easy-cue sentences carry
/// margins near 0.9 from the cue to the sentence end, hard-cue sentences
/// near 0.05, and background tokens near 0.4.
pub fn planted_corpus(seed: u64, n_traces: usize) -> Vec<Trace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_traces)
        .map(|_| {
            let mut tokens: Vec<TokenRecord> = Vec::new();
            let sentences = rng.random_range(8..14);
            for _ in 0..sentences {
                let background = rng.random_range(0.3..0.5);
                match rng.random_range(0..4u32) {
                    // Easy-cue sentence.
                    0 => {
                        let cue = EASY_CUES[rng.random_range(0..EASY_CUES.len())];
                        let planted = rng.random_range(0.85..0.95);
                        push_sentence(&mut tokens, &mut rng, Some(cue), planted, background);
                    }
                    // Hard-cue sentence.
                    1 => {
                        let cue = HARD_CUES[rng.random_range(0..HARD_CUES.len())];
                        let planted = rng.random_range(0.02..0.10);
                        push_sentence(&mut tokens, &mut rng, Some(cue), planted, background);
                    }
                    // Plain sentence.
                    _ => push_sentence(&mut tokens, &mut rng, None, background, background),
                }
            }
            for (i, t) in tokens.iter_mut().enumerate() {
                t.position = i;
            }
            Trace::new(tokens)
        })
        .collect()
}

fn push_sentence(
    tokens: &mut Vec<TokenRecord>,
    rng: &mut ChaCha8Rng,
    cue: Option<&str>,
    cue_margin: f64,
    background: f64,
) {
    tokens.push(margin_token(" ", background));
    if let Some(cue) = cue {
        tokens.push(margin_token(&format!("{},", capitalized(cue)), cue_margin));
    }
    let body_margin = if cue.is_some() { cue_margin } else { background };
    for _ in 0..rng.random_range(2..5usize) {
        let filler = FILLERS[rng.random_range(0..FILLERS.len())];
        tokens.push(margin_token(&format!(" {filler}"), body_margin));
    }
    tokens.push(margin_token(".", body_margin));
}

/// Write one `trace_NNN.jsonl` per trace under `dir`.
pub fn write_corpus_jsonl(traces: &[Trace], dir: impl AsRef<std::path::Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (i, trace) in traces.iter().enumerate() {
        let file = std::fs::File::create(dir.join(format!("trace_{i:03}.jsonl")))?;
        trace.to_jsonl(std::io::BufWriter::new(file))?;
    }
    Ok(())
}

/// Scripts for the canonical two-cue switching session: the large model
/// hits "Thus," and "Wait,", the small model offloads two sentences, and
/// the answer stage follows `</think>`. Both models share the token
/// stream; only the probabilities differ.
pub struct TwoCueFixture {
    pub prompt: String,
    pub large_script: Script,
    pub small_script: Script,
    /// Surfaces the session should use as large-model stops.
    pub cue_surfaces: Vec<String>,
}

pub fn two_cue_session(large_model: &str, small_model: &str) -> TwoCueFixture {
    let surfaces = [
        "Solve: ", "We", " start", " carefully", "Thus,", " x", " equals", " four", ".",
        " Indeed", " more", " steps", " ", "Wait,", " then", " y", " too", ".", " Finally",
        " conclude", THINK_END, " The", " answer", " is", " 4", ".",
    ];
    let large_tokens: Vec<ScriptToken> = surfaces
        .iter()
        .map(|s| ScriptToken::with_margin(*s, 0.7))
        .collect();
    let small_tokens: Vec<ScriptToken> = surfaces
        .iter()
        .map(|s| ScriptToken::with_margin(*s, 0.5))
        .collect();
    TwoCueFixture {
        prompt: "Solve: ".to_string(),
        large_script: Script::new(large_model, large_tokens),
        small_script: Script::new(small_model, small_tokens),
        cue_surfaces: vec!["Thus,".to_string(), "Wait,".to_string()],
    }
}

/// Scripted delegation pairs: `n_pairs` problems whose large and small
/// answer branches agree everywhere except at `divergent_index`.
pub struct DelegationFixture {
    pub problems: Vec<crate::evalharness::Problem>,
    pub large_scripts: Vec<Script>,
    pub small_scripts: Vec<Script>,
}

pub fn delegation_fixture(
    large_model: &str,
    small_model: &str,
    n_pairs: usize,
    divergent_index: usize,
) -> DelegationFixture {
    let mut problems = Vec::with_capacity(n_pairs);
    let mut large_scripts = Vec::with_capacity(n_pairs);
    let mut small_scripts = Vec::with_capacity(n_pairs);
    for i in 0..n_pairs {
        let prompt = format!("Problem {i}: ");
        let answer = 100 + (i % 797);
        let small_answer = if i == divergent_index { answer + 1 } else { answer };
        let prefix = vec![
            ScriptToken::with_margin(&prompt, 0.6),
            ScriptToken::with_margin("reasoning", 0.6),
            ScriptToken::with_margin(" steps", 0.6),
            ScriptToken::with_margin(THINK_END, 0.6),
        ];
        let branch = |value: usize| {
            let mut tokens = prefix.clone();
            tokens.push(ScriptToken::with_margin(" The answer is \\boxed{", 0.6));
            tokens.push(ScriptToken::with_margin(value.to_string(), 0.6));
            tokens.push(ScriptToken::with_margin("}.", 0.6));
            tokens
        };
        large_scripts.push(Script::new(large_model, branch(answer)));
        small_scripts.push(Script::new(small_model, branch(small_answer)));
        problems.push(crate::evalharness::Problem {
            id: format!("pair{i}"),
            prompt,
            reference_answer: answer.to_string(),
        });
    }
    DelegationFixture {
        problems,
        large_scripts,
        small_scripts,
    }
}

//! Benchmark harness: runs problem sets through switching sessions,
//! extracts and normalizes final answers, computes pass@1, and measures
//! answer-stage delegation consistency.
//!
//! Answer matching is deliberately string-level (boxed span or a value
//! after a terminal "answer" marker, lightly normalized) rather than
//! symbolic: the comparisons here control both sides of every pair, so
//! symbolic equivalence would add risk without coverage.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::calibration::SwitchCueSet;
use crate::client::{GenerateOptions, ModelClient, SamplingParams, StopReason};
use crate::error::{Error, Result};
use crate::metrics;
use crate::switcher::{self, Budgets, Transcript, THINK_END};
use crate::util::parallel_map;

/// One benchmark problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub prompt: String,
    /// Normalized on load.
    #[serde(rename = "answer")]
    pub reference_answer: String,
}

/// How answers are read out of generated text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerMode {
    /// Boxed span, falling back to the last value after an "answer" marker.
    #[default]
    Boxed,
    /// Single letter A-E (multiple-choice sets).
    Choice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub transcript: Transcript,
    pub extracted_answer: Option<String>,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub problem_id: String,
    pub samples: Vec<SampleResult>,
}

/// Load problems from JSONL `{id, prompt, answer}`, normalizing the
/// reference answers and rejecting duplicate ids.
pub fn load_problems(reader: impl Read) -> Result<Vec<Problem>> {
    let mut problems: Vec<Problem> = Vec::new();
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut problem: Problem =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                position: lineno,
                reason: format!("invalid problem line: {e}"),
            })?;
        problem.reference_answer = normalize_answer(&problem.reference_answer);
        if problems.iter().any(|p| p.id == problem.id) {
            return Err(Error::BadRequest(format!(
                "duplicate problem id {:?}",
                problem.id
            )));
        }
        problems.push(problem);
    }
    Ok(problems)
}

pub fn load_problems_path(path: impl AsRef<Path>) -> Result<Vec<Problem>> {
    load_problems(std::fs::File::open(path)?)
}

static BOXED_START: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\\boxed\s*\{").expect("static regex"));
static ANSWER_MARKER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)answer").expect("static regex"));
static NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[-+]?\d[\d,]*(?:\.\d+)?").expect("static regex"));
static CHOICE_LETTER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\b([A-Ea-e])\b").expect("static regex"));

/// Extract the final answer from generated text: the last boxed span if
/// present, else the first number after the last "answer" marker.
/// Absent is a valid outcome.
pub fn extract_answer(text: &str) -> Option<String> {
    extract_answer_with_mode(text, AnswerMode::Boxed)
}

pub fn extract_answer_with_mode(text: &str, mode: AnswerMode) -> Option<String> {
    match mode {
        AnswerMode::Boxed => last_boxed_span(text)
            .map(|s| normalize_answer(&s))
            .or_else(|| marker_answer(text).map(|s| normalize_answer(&s))),
        AnswerMode::Choice => {
            let from_box = last_boxed_span(text)
                .and_then(|s| CHOICE_LETTER.captures(&s).map(|c| c[1].to_uppercase()));
            from_box.or_else(|| {
                let tail = last_marker_tail(text)?;
                CHOICE_LETTER.captures(tail).map(|c| c[1].to_uppercase())
            })
        }
    }
}

/// Content of the last `\boxed{...}` span, with nested braces balanced.
fn last_boxed_span(text: &str) -> Option<String> {
    let start = BOXED_START.find_iter(text).last()?;
    let tail = &text[start.end()..];
    let mut depth = 1usize;
    for (i, c) in tail.char_indices() {
        match c {
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(tail[..i].to_string());
                }
            }
            _ => {}
        }
    }
    None
}

fn last_marker_tail(text: &str) -> Option<&str> {
    let last = ANSWER_MARKER.find_iter(text).last()?;
    Some(&text[last.end()..])
}

fn marker_answer(text: &str) -> Option<String> {
    let tail = last_marker_tail(text)?;
    NUMBER.find(tail).map(|m| m.as_str().to_string())
}

/// String-level normalization: trim, drop `$` wrappers and trailing
/// sentence punctuation, remove thousands separators from plain numbers,
/// strip a trailing `.0…`, and strip leading zeros ("042.0" → "42").
pub fn normalize_answer(raw: &str) -> String {
    let mut s = raw.trim().trim_matches('$').trim().to_string();
    while s.ends_with(['.', ',', ';', ':', '!', '?']) && !s.ends_with(".0") {
        s.pop();
        s = s.trim_end().to_string();
    }
    let numberish = !s.is_empty()
        && s.trim_start_matches(['+', '-'])
            .chars()
            .all(|c| c.is_ascii_digit() || c == ',' || c == '.');
    if numberish {
        s.retain(|c| c != ',');
        if let Some(stripped) = s.strip_prefix('+') {
            s = stripped.to_string();
        }
        // Trailing ".0", ".00", ...
        if let Some(dot) = s.rfind('.') {
            if s[dot + 1..].chars().all(|c| c == '0') && !s[dot + 1..].is_empty() {
                s.truncate(dot);
            }
        }
        let negative = s.starts_with('-');
        let digits = if negative { &s[1..] } else { &s[..] };
        let trimmed = digits.trim_start_matches('0');
        let body = if trimmed.is_empty() || trimmed.starts_with('.') {
            format!("0{trimmed}")
        } else {
            trimmed.to_string()
        };
        s = if negative { format!("-{body}") } else { body };
    }
    s
}

/// pass@1: mean over problems of the per-problem correct fraction.
pub fn pass_at_1(runs: &[EvalRun]) -> Result<f64> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("eval runs".into()));
    }
    let mut total = 0.0;
    for run in runs {
        if run.samples.is_empty() {
            return Err(Error::EmptyInput(format!(
                "problem {} has no samples",
                run.problem_id
            )));
        }
        let correct = run.samples.iter().filter(|s| s.correct).count();
        total += correct as f64 / run.samples.len() as f64;
    }
    Ok(total / runs.len() as f64)
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub samples_per_problem: usize,
    pub budgets: Budgets,
    pub sampling: SamplingParams,
    pub answer_mode: AnswerMode,
    pub jobs: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples_per_problem: 4,
            budgets: Budgets::default(),
            sampling: SamplingParams::default(),
            answer_mode: AnswerMode::Boxed,
            jobs: 1,
        }
    }
}

/// Run every problem through switching sessions and grade the extracted
/// answers. Problems evaluate concurrently; a problem's samples run
/// sequentially; results aggregate in problem order regardless of
/// completion order.
pub fn evaluate(
    problems: &[Problem],
    large_client: &dyn ModelClient,
    small_client: &dyn ModelClient,
    cue_set: &SwitchCueSet,
    config: &EvalConfig,
) -> Result<Vec<EvalRun>> {
    if problems.is_empty() {
        return Err(Error::EmptyInput("problems".into()));
    }
    parallel_map(config.jobs, problems.to_vec(), |problem| -> Result<EvalRun> {
        let mut samples = Vec::with_capacity(config.samples_per_problem);
        for _ in 0..config.samples_per_problem {
            let session = switcher::start_session(&problem.prompt, cue_set, config.budgets)?
                .with_sampling(config.sampling);
            let transcript = switcher::run(session, large_client, small_client)?;
            let extracted =
                extract_answer_with_mode(&transcript.generated_text(), config.answer_mode);
            let correct = extracted.as_deref() == Some(problem.reference_answer.as_str());
            samples.push(SampleResult {
                transcript,
                extracted_answer: extracted,
                correct,
            });
        }
        Ok(EvalRun {
            problem_id: problem.id.clone(),
            samples,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone)]
pub struct DelegationConfig {
    /// Cap for the reasoning prefix generation.
    pub reasoning_max_tokens: usize,
    /// Cap for each answer branch.
    pub answer_max_tokens: usize,
    pub sampling: SamplingParams,
    pub answer_mode: AnswerMode,
    pub jobs: usize,
}

impl Default for DelegationConfig {
    fn default() -> Self {
        Self {
            reasoning_max_tokens: 32_768,
            answer_max_tokens: 4096,
            sampling: SamplingParams::default(),
            answer_mode: AnswerMode::Boxed,
            jobs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelegationPair {
    pub problem_id: String,
    pub large_answer: Option<String>,
    pub small_answer: Option<String>,
    pub matched: bool,
}

/// Outcome of the answer-stage delegation experiment. Per-problem
/// endpoint failures are recorded and excluded from the rate, so a
/// partial report stays valid with a coverage note.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelegationReport {
    pub attempted: usize,
    pub completed: usize,
    pub matches: usize,
    pub matching_rate: f64,
    pub pairs: Vec<DelegationPair>,
    pub errors: Vec<(String, String)>,
}

impl DelegationReport {
    /// One row: total / matches / rate, in percent.
    pub fn render_row(&self) -> String {
        format!(
            "{:>13} {:>9} {:>14.2}%",
            self.completed,
            self.matches,
            self.matching_rate * 100.0
        )
    }
}

/// For each problem, generate the reasoning stage with the large model
/// through `</think>`, then complete the answer stage twice from the
/// identical prefix — once with the large model, once with the small —
/// and compare extracted answers.
pub fn answer_delegation_experiment(
    problems: &[Problem],
    large_client: &dyn ModelClient,
    small_client: &dyn ModelClient,
    config: &DelegationConfig,
) -> Result<DelegationReport> {
    if problems.is_empty() {
        return Err(Error::EmptyInput("problems".into()));
    }
    let outcomes = parallel_map(config.jobs, problems.to_vec(), |problem| {
        let outcome = delegation_pair(&problem, large_client, small_client, config);
        (problem.id.clone(), outcome)
    });

    let mut pairs = Vec::new();
    let mut errors = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(pair) => pairs.push(pair),
            Err(err) => errors.push((id, err.to_string())),
        }
    }
    let completed = pairs.len();
    let matches = pairs.iter().filter(|p| p.matched).count();
    let reference: Vec<&Option<String>> = pairs.iter().map(|p| &p.large_answer).collect();
    let test: Vec<&Option<String>> = pairs.iter().map(|p| &p.small_answer).collect();
    let matching_rate = if completed == 0 {
        0.0
    } else {
        metrics::matching_rate(&reference, &test)?
    };
    Ok(DelegationReport {
        attempted: problems.len(),
        completed,
        matches,
        matching_rate,
        pairs,
        errors,
    })
}

fn delegation_pair(
    problem: &Problem,
    large_client: &dyn ModelClient,
    small_client: &dyn ModelClient,
    config: &DelegationConfig,
) -> Result<DelegationPair> {
    let reasoning = large_client.generate(
        &problem.prompt,
        &GenerateOptions {
            stop_surfaces: vec![THINK_END.to_string()],
            max_tokens: config.reasoning_max_tokens,
            sampling: config.sampling,
        },
    )?;
    if reasoning.stop_reason != StopReason::StopSurface(THINK_END.to_string()) {
        return Err(Error::BadRequest(format!(
            "reasoning stage never produced {THINK_END} (stopped with {:?})",
            reasoning.stop_reason
        )));
    }
    let prefix = format!("{}{}", problem.prompt, reasoning.text());

    let answer_options = GenerateOptions {
        stop_surfaces: Vec::new(),
        max_tokens: config.answer_max_tokens,
        sampling: config.sampling,
    };
    let large_branch = large_client.generate(&prefix, &answer_options)?;
    let small_branch = small_client.generate(&prefix, &answer_options)?;
    let large_answer = extract_answer_with_mode(&large_branch.text(), config.answer_mode);
    let small_answer = extract_answer_with_mode(&small_branch.text(), config.answer_mode);
    Ok(DelegationPair {
        problem_id: problem.id.clone(),
        matched: large_answer == small_answer,
        large_answer,
        small_answer,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mocksim::{MockBackend, MockClient, Script, ScriptToken};
    use std::sync::Arc;

    #[test]
    fn boxed_answer_extracted() {
        assert_eq!(
            extract_answer("thus we get \\boxed{42}."),
            Some("42".to_string())
        );
    }

    #[test]
    fn last_boxed_wins() {
        assert_eq!(
            extract_answer("\\boxed{1} ... later \\boxed{7}"),
            Some("7".to_string())
        );
    }

    #[test]
    fn nested_braces_balanced() {
        assert_eq!(
            extract_answer(r"\boxed{\frac{1}{2}}"),
            Some(r"\frac{1}{2}".to_string())
        );
    }

    #[test]
    fn marker_answer_normalized() {
        assert_eq!(
            extract_answer("… the answer is 042.0"),
            Some("42".to_string())
        );
    }

    #[test]
    fn absent_answer() {
        assert_eq!(extract_answer("no conclusion here"), None);
        assert_eq!(extract_answer(""), None);
    }

    #[test]
    fn marker_without_number_is_absent() {
        assert_eq!(extract_answer("the answer is unclear"), None);
    }

    #[test]
    fn normalization_rules() {
        assert_eq!(normalize_answer(" 42. "), "42");
        assert_eq!(normalize_answer("042.0"), "42");
        assert_eq!(normalize_answer("42.00"), "42");
        assert_eq!(normalize_answer("0.5"), "0.5");
        assert_eq!(normalize_answer("000"), "0");
        assert_eq!(normalize_answer("1,000"), "1000");
        assert_eq!(normalize_answer("$12$"), "12");
        assert_eq!(normalize_answer("+7"), "7");
        assert_eq!(normalize_answer("-03"), "-3");
        assert_eq!(normalize_answer("x+1"), "x+1");
    }

    #[test]
    fn extraction_idempotent_under_reboxing() {
        for text in [
            "the answer is 042.0",
            "\\boxed{42}.",
            "\\boxed{0.5}",
            "answer: 1,000",
        ] {
            let first = extract_answer(text).unwrap();
            let reboxed = format!("\\boxed{{{first}}}");
            assert_eq!(extract_answer(&reboxed), Some(first));
        }
    }

    #[test]
    fn choice_mode_extracts_letter() {
        assert_eq!(
            extract_answer_with_mode("the answer is (C) because…", AnswerMode::Choice),
            Some("C".to_string())
        );
        assert_eq!(
            extract_answer_with_mode("Answer: \\boxed{B}", AnswerMode::Choice),
            Some("B".to_string())
        );
        assert_eq!(
            extract_answer_with_mode("answer is d", AnswerMode::Choice),
            Some("D".to_string())
        );
    }

    fn run_with(flags: &[bool]) -> EvalRun {
        EvalRun {
            problem_id: "p".into(),
            samples: flags
                .iter()
                .map(|&correct| SampleResult {
                    transcript: empty_transcript(),
                    extracted_answer: None,
                    correct,
                })
                .collect(),
        }
    }

    fn empty_transcript() -> Transcript {
        use crate::switcher::{Phase, TranscriptStats};
        Transcript {
            text: String::new(),
            prompt: String::new(),
            tokens: Vec::new(),
            events: Vec::new(),
            stats: TranscriptStats {
                prompt_tokens: 0,
                total_tokens: 0,
                large_tokens: 0,
                small_tokens: 0,
                turns: 0,
                phase_at_end: Phase::Done,
                ended_by: None,
                aborted: None,
                prefill_tokens_by_model: Default::default(),
                pending_prefill_by_model: Default::default(),
            },
        }
    }

    #[test]
    fn pass_at_1_examples() {
        assert_eq!(pass_at_1(&[run_with(&[true, true])]).unwrap(), 1.0);
        assert_eq!(
            pass_at_1(&[run_with(&[true, false, true, false])]).unwrap(),
            0.5
        );
        let runs = vec![run_with(&[true, true]), run_with(&[true, false])];
        assert!((pass_at_1(&runs).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn pass_at_1_order_invariant_and_bounded() {
        let a = vec![run_with(&[true, false]), run_with(&[false, false])];
        let b = vec![run_with(&[false, true]), run_with(&[false, false])];
        assert_eq!(pass_at_1(&a).unwrap(), pass_at_1(&b).unwrap());
        let value = pass_at_1(&a).unwrap();
        assert!((0.0..=1.0).contains(&value));
    }

    #[test]
    fn pass_at_1_empty_rejected() {
        assert!(matches!(pass_at_1(&[]).unwrap_err(), Error::EmptyInput(_)));
        assert!(matches!(
            pass_at_1(&[EvalRun {
                problem_id: "p".into(),
                samples: vec![]
            }])
            .unwrap_err(),
            Error::EmptyInput(_)
        ));
    }

    #[test]
    fn problems_jsonl_loads_and_normalizes() {
        let input = concat!(
            r#"{"id": "a", "prompt": "P1 ", "answer": "042.0"}"#,
            "\n",
            r#"{"id": "b", "prompt": "P2 ", "answer": "7"}"#,
            "\n",
        );
        let problems = load_problems(input.as_bytes()).unwrap();
        assert_eq!(problems[0].reference_answer, "42");
        let dup = concat!(
            r#"{"id": "a", "prompt": "x", "answer": "1"}"#,
            "\n",
            r#"{"id": "a", "prompt": "y", "answer": "2"}"#,
            "\n",
        );
        assert!(load_problems(dup.as_bytes()).is_err());
    }

    // ------------------------------------------------------------------
    // Delegation experiment against scripted backends
    // ------------------------------------------------------------------

    fn greedy(surface: &str) -> ScriptToken {
        ScriptToken::with_margin(surface, 0.6)
    }

    fn delegation_scripts(
        problem: &str,
        large_answer: &str,
        small_answer: &str,
    ) -> (Script, Script) {
        let prefix = vec![
            greedy(problem),
            greedy("reasoning"),
            greedy(" here"),
            greedy(THINK_END),
        ];
        let mut large = prefix.clone();
        large.push(greedy(" The answer is "));
        large.push(greedy(large_answer));
        large.push(greedy("."));
        let mut small = prefix;
        small.push(greedy(" The answer is "));
        small.push(greedy(small_answer));
        small.push(greedy("."));
        (
            Script::new("large-m", large),
            Script::new("small-m", small),
        )
    }

    fn problems(n: usize) -> Vec<Problem> {
        (0..n)
            .map(|i| Problem {
                id: format!("p{i}"),
                prompt: format!("P{i}: "),
                reference_answer: "42".into(),
            })
            .collect()
    }

    #[test]
    fn delegation_matching_pair() {
        let (large, small) = delegation_scripts("P0: ", "42", "42");
        let backend = Arc::new(MockBackend::new(vec![large, small]));
        let report = answer_delegation_experiment(
            &problems(1),
            &MockClient::new(backend.clone(), "large-m"),
            &MockClient::new(backend, "small-m"),
            &DelegationConfig::default(),
        )
        .unwrap();
        assert_eq!(report.completed, 1);
        assert_eq!(report.matches, 1);
        assert_eq!(report.matching_rate, 1.0);
    }

    #[test]
    fn delegation_divergence_counted() {
        let (large, small) = delegation_scripts("P0: ", "42", "43");
        let backend = Arc::new(MockBackend::new(vec![large, small]));
        let report = answer_delegation_experiment(
            &problems(1),
            &MockClient::new(backend.clone(), "large-m"),
            &MockClient::new(backend, "small-m"),
            &DelegationConfig::default(),
        )
        .unwrap();
        assert_eq!(report.matches, 0);
        assert_eq!(report.matching_rate, 0.0);
        assert_eq!(report.pairs[0].large_answer.as_deref(), Some("42"));
        assert_eq!(report.pairs[0].small_answer.as_deref(), Some("43"));
    }

    #[test]
    fn delegation_same_client_always_matches() {
        let (large, _) = delegation_scripts("P0: ", "42", "42");
        let backend = Arc::new(MockBackend::new(vec![large]));
        let client = MockClient::new(backend, "large-m");
        let report = answer_delegation_experiment(
            &problems(1),
            &client,
            &client,
            &DelegationConfig::default(),
        )
        .unwrap();
        assert_eq!(report.matching_rate, 1.0);
    }

    #[test]
    fn delegation_partial_report_on_missing_script() {
        let (large, small) = delegation_scripts("P0: ", "42", "42");
        let backend = Arc::new(MockBackend::new(vec![large, small]));
        let two = problems(2); // p1 has no script: per-problem error
        let report = answer_delegation_experiment(
            &two,
            &MockClient::new(backend.clone(), "large-m"),
            &MockClient::new(backend, "small-m"),
            &DelegationConfig::default(),
        )
        .unwrap();
        assert_eq!(report.attempted, 2);
        assert_eq!(report.completed, 1);
        assert_eq!(report.errors.len(), 1);
        assert_eq!(report.matching_rate, 1.0);
    }

    #[test]
    fn evaluate_grades_full_sessions() {
        use crate::margin::MarginStats;
        let tokens = vec![
            greedy("P0: "),
            greedy("short"),
            greedy(" reasoning"),
            greedy(THINK_END),
            greedy(" The answer is "),
            greedy("42"),
            greedy("."),
        ];
        let backend = Arc::new(MockBackend::new(vec![
            Script::new("large-m", tokens.clone()),
            Script::new("small-m", tokens),
        ]));
        let cue_set = SwitchCueSet {
            model_pair: ("large-m".into(), "small-m".into()),
            surfaces: Default::default(),
            selection_report: Vec::new(),
            global_stats: MarginStats {
                mean: 0.5,
                std_dev: 0.0,
                std_err: 0.0,
                n: 2,
            },
        };
        let config = EvalConfig {
            samples_per_problem: 2,
            ..Default::default()
        };
        let runs = evaluate(
            &problems(1),
            &MockClient::new(backend.clone(), "large-m"),
            &MockClient::new(backend, "small-m"),
            &cue_set,
            &config,
        )
        .unwrap();
        assert_eq!(runs.len(), 1);
        assert_eq!(runs[0].samples.len(), 2);
        assert!(runs[0].samples.iter().all(|s| s.correct));
        assert_eq!(pass_at_1(&runs).unwrap(), 1.0);
    }
}

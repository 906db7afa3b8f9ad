//! Deterministic scripted model backend and analytical latency simulator.
//!
//! A [`Script`] is a fixed token stream with per-token top-k
//! probabilities. The backend replays it exactly as a real server would:
//! the request prompt selects the resume point by longest-prefix match
//! into the script text, stop surfaces and `max_tokens` are honored, and
//! identical requests produce identical results. The same backend serves
//! in-process (fast unit tests, via [`MockClient`]) and over HTTP with
//! the real wire protocol (see [`http`]).
//!
//! Latency is simulated analytically from per-token cost models rather
//! than measured: wall-clock numbers are hardware-bound, but the
//! structure of the accounting (decode, switch, prefill, and optional
//! draft/verify re-costing of large segments) is checkable at desk scale.

pub mod http;

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::{
    GenerateOptions, GenerateResult, ModelClient, ModelMetadata, StopReason, Usage,
};
use crate::error::{Error, Result};
use crate::trace::{Producer, TokenRecord};

/// One scripted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptToken {
    pub surface: String,
    /// `(surface, prob)` sorted descending; at least two entries.
    #[serde(rename = "top")]
    pub top_probs: Vec<(String, f64)>,
}

impl ScriptToken {
    pub fn new(surface: impl Into<String>, top_probs: Vec<(String, f64)>) -> Self {
        Self {
            surface: surface.into(),
            top_probs,
        }
    }

    /// Greedy token: the surface itself carries probability `0.5 + margin/2`,
    /// the alternative `0.5 - margin/2`, so the margin is exact.
    pub fn with_margin(surface: impl Into<String>, margin: f64) -> Self {
        let surface = surface.into();
        Self {
            top_probs: vec![
                (surface.clone(), 0.5 + margin / 2.0),
                ("<alt>".to_string(), 0.5 - margin / 2.0),
            ],
            surface,
        }
    }
}

/// One deterministic generation path for one model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub model_id: String,
    pub stream: Vec<ScriptToken>,
    /// Pre-baked rescoring answers for texts that are not token-aligned
    /// prefixes of the stream.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub echo_table: BTreeMap<String, Vec<TokenRecord>>,
    /// Simulated per-token delay applied by the HTTP server only.
    #[serde(skip)]
    pub per_token_latency: Duration,
}

impl Script {
    pub fn new(model_id: impl Into<String>, stream: Vec<ScriptToken>) -> Self {
        Self {
            model_id: model_id.into(),
            stream,
            echo_table: BTreeMap::new(),
            per_token_latency: Duration::ZERO,
        }
    }

    pub fn text(&self) -> String {
        self.stream.iter().map(|t| t.surface.as_str()).collect()
    }

    fn byte_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.stream.len() + 1);
        let mut acc = 0;
        for t in &self.stream {
            offsets.push(acc);
            acc += t.surface.len();
        }
        offsets.push(acc);
        offsets
    }

    /// Token index at which a prompt that is a prefix of this script's
    /// text resumes, or None if the prompt is not a token-aligned prefix.
    fn resume_index(&self, prompt: &str) -> Option<usize> {
        if !self.text().starts_with(prompt) {
            return None;
        }
        self.byte_offsets()
            .iter()
            .position(|&off| off == prompt.len())
    }

    /// Load a script stream from JSONL, one token per line:
    /// `{"surface": " the", "top": [[" the", 0.7], [" a", 0.2]]}`.
    pub fn from_jsonl(model_id: impl Into<String>, reader: impl Read) -> Result<Self> {
        let mut stream = Vec::new();
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let token: ScriptToken =
                serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    position: lineno,
                    reason: format!("invalid script line: {e}"),
                })?;
            stream.push(token);
        }
        Ok(Self::new(model_id, stream))
    }

    pub fn from_jsonl_path(model_id: impl Into<String>, path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_jsonl(model_id, file)
    }

    /// Write the stream as JSONL, one token per line (the `mock-serve`
    /// input format; model id travels out of band).
    pub fn write_stream_jsonl(&self, mut writer: impl std::io::Write) -> Result<()> {
        for token in &self.stream {
            serde_json::to_writer(&mut writer, token)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// One scored token: its surface and, when a conditional distribution
/// exists at that position, its top-k probabilities.
pub type ScoredPosition = (String, Option<Vec<(String, f64)>>);

/// What one scripted generation produced, before any wire encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct ServedGeneration {
    pub tokens: Vec<ScriptToken>,
    pub stop_reason: StopReason,
    pub prompt_tokens: usize,
    /// Simulated delay the HTTP server should apply per emitted token.
    pub per_token_latency: Duration,
}

/// A scripted backend holding one or more paths, possibly for several
/// model ids. Immutable after construction and shareable across threads.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    scripts: Vec<Script>,
}

impl MockBackend {
    pub fn new(scripts: Vec<Script>) -> Self {
        Self { scripts }
    }

    pub fn model_ids(&self) -> BTreeSet<String> {
        self.scripts.iter().map(|s| s.model_id.clone()).collect()
    }

    /// First script (in insertion order) of the given model whose text
    /// has `prompt` as a token-aligned prefix.
    fn find_script(&self, model_id: &str, prompt: &str) -> Result<(&Script, usize)> {
        if !self.scripts.iter().any(|s| s.model_id == model_id) {
            return Err(Error::ModelNotFound(model_id.to_string()));
        }
        for script in self.scripts.iter().filter(|s| s.model_id == model_id) {
            if let Some(resume) = script.resume_index(prompt) {
                return Ok((script, resume));
            }
        }
        Err(Error::ScriptMiss(format!(
            "prompt ({} bytes, starts {:?}) is not a token-aligned prefix of any {model_id} script",
            prompt.len(),
            &prompt[..prompt.len().min(48)],
        )))
    }

    /// Replay a script against a generation request.
    ///
    /// At each token boundary, stop surfaces are checked first (exact
    /// match over whole upcoming tokens; `</think>` takes absolute
    /// priority, then longest surface first), then `max_tokens`, then
    /// script exhaustion maps to end-of-sequence. With
    /// `include_stop = false` the matched surface's tokens are withheld,
    /// mirroring servers that strip stop strings from output.
    pub fn generate(
        &self,
        model_id: &str,
        prompt: &str,
        stop_surfaces: &[String],
        max_tokens: usize,
        logprobs_top_k: usize,
        include_stop: bool,
    ) -> Result<ServedGeneration> {
        let (script, resume) = self.find_script(model_id, prompt)?;
        let stops = ordered_stops(stop_surfaces);

        let mut emitted: Vec<ScriptToken> = Vec::new();
        let mut idx = resume;
        let stop_reason = loop {
            if let Some((surface, span)) = match_stop_at(&script.stream, idx, &stops) {
                if include_stop {
                    emitted.extend(script.stream[idx..idx + span].iter().cloned());
                }
                break StopReason::StopSurface(surface.to_string());
            }
            if emitted.len() >= max_tokens {
                break StopReason::MaxTokens;
            }
            if idx >= script.stream.len() {
                break StopReason::EndOfSequence;
            }
            emitted.push(script.stream[idx].clone());
            idx += 1;
        };

        let tokens = emitted
            .into_iter()
            .map(|t| ScriptToken {
                surface: t.surface,
                top_probs: clamp_top_k(t.top_probs, logprobs_top_k),
            })
            .collect();
        Ok(ServedGeneration {
            tokens,
            stop_reason,
            prompt_tokens: resume,
            per_token_latency: script.per_token_latency,
        })
    }

    /// Deterministic per-position scoring of an existing text. Position 0
    /// carries no conditional distribution, mirroring real servers; it is
    /// reported as `None`.
    pub fn rescore(
        &self,
        model_id: &str,
        text: &str,
        logprobs_top_k: usize,
    ) -> Result<Vec<ScoredPosition>> {
        if text.is_empty() {
            return Err(Error::BadRequest("cannot rescore empty text".into()));
        }
        if !self.scripts.iter().any(|s| s.model_id == model_id) {
            return Err(Error::ModelNotFound(model_id.to_string()));
        }
        for script in self.scripts.iter().filter(|s| s.model_id == model_id) {
            if let Some(records) = script.echo_table.get(text) {
                return Ok(records
                    .iter()
                    .enumerate()
                    .map(|(i, r)| {
                        let top = (i > 0).then(|| clamp_top_k(r.top_probs.clone(), logprobs_top_k));
                        (r.text.clone(), top)
                    })
                    .collect());
            }
            if let Some(end) = script.resume_index(text) {
                return Ok(script.stream[..end]
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let top = (i > 0).then(|| clamp_top_k(t.top_probs.clone(), logprobs_top_k));
                        (t.surface.clone(), top)
                    })
                    .collect());
            }
        }
        Err(Error::ScriptMiss(format!(
            "text ({} bytes) neither in echo table nor a token-aligned prefix of any {model_id} script",
            text.len(),
        )))
    }
}

/// `</think>` first, then longest surface first, ties lexicographic.
fn ordered_stops(stops: &[String]) -> Vec<&str> {
    let mut ordered: Vec<&str> = stops.iter().map(String::as_str).collect();
    ordered.sort_by(|a, b| {
        let a_think = *a == "</think>";
        let b_think = *b == "</think>";
        b_think
            .cmp(&a_think)
            .then(b.len().cmp(&a.len()))
            .then(a.cmp(b))
    });
    ordered.dedup();
    ordered
}

/// Does any stop surface equal the concatenation of whole tokens
/// starting at `idx`? Returns the surface and how many tokens it spans.
fn match_stop_at<'a>(
    stream: &[ScriptToken],
    idx: usize,
    ordered_stops: &[&'a str],
) -> Option<(&'a str, usize)> {
    for &surface in ordered_stops {
        let mut acc = String::new();
        for (j, token) in stream[idx.min(stream.len())..].iter().enumerate() {
            acc.push_str(&token.surface);
            if acc == surface {
                return Some((surface, j + 1));
            }
            if acc.len() >= surface.len() {
                break;
            }
        }
    }
    None
}

fn clamp_top_k(mut top: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    top.truncate(k.max(2));
    top
}

// ---------------------------------------------------------------------------
// In-process client
// ---------------------------------------------------------------------------

/// [`ModelClient`] over a shared in-process backend. Unlike stripping
/// HTTP servers, the in-process path returns the matched stop surface as
/// its real scripted tokens, so downstream margin analysis sees true
/// probabilities; the stop-inclusion contract holds either way.
#[derive(Clone)]
pub struct MockClient {
    backend: Arc<MockBackend>,
    model_id: String,
    logprobs_top_k: usize,
}

impl MockClient {
    pub fn new(backend: Arc<MockBackend>, model_id: impl Into<String>) -> Self {
        Self {
            backend,
            model_id: model_id.into(),
            logprobs_top_k: 5,
        }
    }

    pub fn with_logprobs_top_k(mut self, k: usize) -> Self {
        self.logprobs_top_k = k;
        self
    }
}

impl ModelClient for MockClient {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn generate(&self, prompt: &str, options: &GenerateOptions) -> Result<GenerateResult> {
        if options.max_tokens == 0 {
            return Err(Error::BadRequest("max_tokens must be >= 1".into()));
        }
        let served = self.backend.generate(
            &self.model_id,
            prompt,
            &options.stop_surfaces,
            options.max_tokens,
            self.logprobs_top_k,
            true,
        )?;
        let completion_tokens = served.tokens.len();
        Ok(GenerateResult {
            tokens: served
                .tokens
                .into_iter()
                .enumerate()
                .map(|(i, t)| TokenRecord::new(t.surface, t.top_probs, i))
                .collect(),
            stop_reason: served.stop_reason,
            usage: Usage {
                prompt_tokens: served.prompt_tokens,
                completion_tokens,
            },
        })
    }

    fn rescore(&self, text: &str) -> Result<Vec<TokenRecord>> {
        let scored = self.backend.rescore(&self.model_id, text, self.logprobs_top_k)?;
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(i, (surface, top))| match top {
                Some(top_probs) => TokenRecord::new(surface, top_probs, i),
                None => TokenRecord::synthetic(surface, i),
            })
            .collect())
    }

    fn health_check(&self) -> Result<ModelMetadata> {
        let available: Vec<String> = self.backend.model_ids().into_iter().collect();
        if !available.iter().any(|id| id == &self.model_id) {
            return Err(Error::ModelNotFound(self.model_id.clone()));
        }
        Ok(ModelMetadata {
            model_id: self.model_id.clone(),
            available_models: available,
        })
    }
}

// ---------------------------------------------------------------------------
// Analytical latency simulation
// ---------------------------------------------------------------------------

/// Draft/verify profile for re-costing large-model decode segments under
/// speculative decoding. Spans are in accepted tokens per verification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpecDecodeProfile {
    pub mean_accepted_span: f64,
    /// Seconds per verification invocation.
    pub verify_cost: f64,
    /// Seconds per drafted token.
    pub draft_cost_per_token: f64,
}

/// Per-token and per-event costs, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub large_cost_per_token: f64,
    pub small_cost_per_token: f64,
    pub switch_overhead: f64,
    pub prefill_cost_per_token: f64,
}

impl CostModel {
    fn validate(&self) -> Result<()> {
        let decode_ok = self.large_cost_per_token > 0.0
            && self.small_cost_per_token > 0.0
            && self.large_cost_per_token.is_finite()
            && self.small_cost_per_token.is_finite();
        if !decode_ok {
            return Err(Error::BadCostModel(format!(
                "per-token decode costs must be positive, got large={} small={}",
                self.large_cost_per_token, self.small_cost_per_token
            )));
        }
        if self.switch_overhead < 0.0 || self.prefill_cost_per_token < 0.0 {
            return Err(Error::BadCostModel(
                "switch and prefill overheads must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub total_latency: f64,
    pub large_decode: f64,
    pub small_decode: f64,
    pub switch_overhead: f64,
    pub prefill: f64,
    /// Plain large-only decode of the same token count.
    pub baseline_large_only: f64,
    pub speedup_vs_large_only: f64,
}

/// Simulate end-to-end latency of an attributed token sequence.
/// Contiguous same-producer runs form the segments.
pub fn simulate_latency(
    attribution: &[Producer],
    cost: &CostModel,
    spec: Option<&SpecDecodeProfile>,
) -> Result<LatencyReport> {
    let mut segments: Vec<(Producer, usize)> = Vec::new();
    for &producer in attribution {
        match segments.last_mut() {
            Some((last, len)) if *last == producer => *len += 1,
            _ => segments.push((producer, 1)),
        }
    }
    simulate_latency_segments(&segments, cost, spec)
}

/// Segment-level variant of [`simulate_latency`]. Segments need not be
/// maximal: adjacent same-producer segments model interrupted invocations
/// (token-level routing fragments draft blocks exactly this way), each
/// paying its own verification and boundary overhead.
pub fn simulate_latency_segments(
    segments: &[(Producer, usize)],
    cost: &CostModel,
    spec: Option<&SpecDecodeProfile>,
) -> Result<LatencyReport> {
    cost.validate()?;
    if let Some(profile) = spec {
        if profile.mean_accepted_span < 1.0 || !profile.mean_accepted_span.is_finite() {
            return Err(Error::BadCostModel(format!(
                "mean_accepted_span must be >= 1, got {}",
                profile.mean_accepted_span
            )));
        }
        if profile.verify_cost <= 0.0 || profile.draft_cost_per_token < 0.0 {
            return Err(Error::BadCostModel(
                "verify cost must be positive and draft cost nonnegative".into(),
            ));
        }
    }
    let total_tokens: usize = segments.iter().map(|(_, len)| len).sum();
    if total_tokens == 0 {
        return Err(Error::EmptyInput("attribution".into()));
    }

    let mut large_decode = 0.0;
    let mut small_decode = 0.0;
    let mut prefill_tokens = 0usize;
    let mut known: BTreeMap<Producer, usize> = BTreeMap::new();
    let mut pos = 0usize;
    for &(producer, len) in segments {
        let seen = known.entry(producer).or_insert(0);
        prefill_tokens += pos - *seen;
        *seen = pos + len;
        pos += len;
        match producer {
            Producer::Large => match spec {
                Some(profile) => {
                    let verifications = (len as f64 / profile.mean_accepted_span).ceil();
                    large_decode += verifications * profile.verify_cost
                        + len as f64 * profile.draft_cost_per_token;
                }
                None => large_decode += len as f64 * cost.large_cost_per_token,
            },
            Producer::Small => small_decode += len as f64 * cost.small_cost_per_token,
        }
    }

    let switch_overhead = segments.len().saturating_sub(1) as f64 * cost.switch_overhead;
    let prefill = prefill_tokens as f64 * cost.prefill_cost_per_token;
    let total_latency = large_decode + small_decode + switch_overhead + prefill;
    let baseline_large_only = total_tokens as f64 * cost.large_cost_per_token;

    Ok(LatencyReport {
        total_latency,
        large_decode,
        small_decode,
        switch_overhead,
        prefill,
        baseline_large_only,
        speedup_vs_large_only: baseline_large_only / total_latency,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn script(model: &str, surfaces: &[&str]) -> Script {
        Script::new(
            model,
            surfaces
                .iter()
                .map(|s| ScriptToken::with_margin(*s, 0.5))
                .collect(),
        )
    }

    fn cost(large: f64, small: f64, switch: f64, prefill: f64) -> CostModel {
        CostModel {
            large_cost_per_token: large,
            small_cost_per_token: small,
            switch_overhead: switch,
            prefill_cost_per_token: prefill,
        }
    }

    #[test]
    fn generate_stops_on_surface() {
        let backend = MockBackend::new(vec![script(
            "m",
            &["Q: ", "x", " is", " four", " so", " far", "Thus,", " done"],
        )]);
        let served = backend
            .generate("m", "Q: ", &["Thus,".to_string()], 100, 5, true)
            .unwrap();
        assert_eq!(served.stop_reason, StopReason::StopSurface("Thus,".into()));
        let text: String = served.tokens.iter().map(|t| t.surface.as_str()).collect();
        assert!(text.ends_with("Thus,"));
        assert_eq!(served.prompt_tokens, 1);

        let stripped = backend
            .generate("m", "Q: ", &["Thus,".to_string()], 100, 5, false)
            .unwrap();
        let text: String = stripped.tokens.iter().map(|t| t.surface.as_str()).collect();
        assert!(text.ends_with(" far"));
    }

    #[test]
    fn stop_can_span_multiple_tokens() {
        let backend = MockBackend::new(vec![script("m", &["p", " a", "Thus", ",", " b"])]);
        let served = backend
            .generate("m", "p", &["Thus,".to_string()], 100, 5, true)
            .unwrap();
        assert_eq!(served.stop_reason, StopReason::StopSurface("Thus,".into()));
        assert_eq!(served.tokens.len(), 3); // " a", "Thus", ","
    }

    #[test]
    fn think_end_has_priority_over_longer_cues() {
        let backend = MockBackend::new(vec![script("m", &["p", "</think>", " more"])]);
        let served = backend
            .generate(
                "m",
                "p",
                &["</think> more".to_string(), "</think>".to_string()],
                100,
                5,
                true,
            )
            .unwrap();
        assert_eq!(
            served.stop_reason,
            StopReason::StopSurface("</think>".into())
        );
    }

    #[test]
    fn absent_stop_runs_to_script_end() {
        let backend = MockBackend::new(vec![script("m", &["p", " a", " b"])]);
        let served = backend
            .generate("m", "p", &["Never".to_string()], 100, 5, true)
            .unwrap();
        assert_eq!(served.stop_reason, StopReason::EndOfSequence);
        assert_eq!(served.tokens.len(), 2);
    }

    #[test]
    fn max_tokens_respected() {
        let backend = MockBackend::new(vec![script("m", &["p", " a", " b", " c"])]);
        let served = backend.generate("m", "p", &[], 1, 5, true).unwrap();
        assert_eq!(served.stop_reason, StopReason::MaxTokens);
        assert_eq!(served.tokens.len(), 1);
    }

    #[test]
    fn deterministic_replay() {
        let backend = MockBackend::new(vec![script("m", &["p", " a", "Thus,", " b"])]);
        let a = backend
            .generate("m", "p", &["Thus,".to_string()], 10, 5, false)
            .unwrap();
        let b = backend
            .generate("m", "p", &["Thus,".to_string()], 10, 5, false)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn script_miss_on_unknown_prompt() {
        let backend = MockBackend::new(vec![script("m", &["p", " a"])]);
        assert!(matches!(
            backend.generate("m", "other", &[], 10, 5, true).unwrap_err(),
            Error::ScriptMiss(_)
        ));
        assert!(matches!(
            backend.generate("missing", "p", &[], 10, 5, true).unwrap_err(),
            Error::ModelNotFound(_)
        ));
    }

    #[test]
    fn script_miss_on_mid_token_prompt() {
        let backend = MockBackend::new(vec![script("m", &["prompt", " a"])]);
        assert!(matches!(
            backend.generate("m", "pro", &[], 10, 5, true).unwrap_err(),
            Error::ScriptMiss(_)
        ));
    }

    #[test]
    fn multi_path_backend_routes_by_prefix() {
        let backend = MockBackend::new(vec![
            script("m", &["Q1 ", "a1"]),
            script("m", &["Q2 ", "a2"]),
        ]);
        let served = backend.generate("m", "Q2 ", &[], 10, 5, true).unwrap();
        assert_eq!(served.tokens[0].surface, "a2");
    }

    #[test]
    fn rescore_prefix_of_stream() {
        let backend = MockBackend::new(vec![script("m", &["a", " b", " c"])]);
        let scored = backend.rescore("m", "a b", 5).unwrap();
        assert_eq!(scored.len(), 2);
        assert!(scored[0].1.is_none());
        assert!(scored[1].1.is_some());
        assert!(matches!(
            backend.rescore("m", "a bc", 5).unwrap_err(),
            Error::ScriptMiss(_)
        ));
    }

    #[test]
    fn rescore_echo_table_overrides_stream_derivation() {
        let mut s = script("m", &["a", " b"]);
        s.echo_table.insert(
            "off-script text".to_string(),
            vec![
                TokenRecord::new("off-script", vec![("off-script".into(), 0.8), ("x".into(), 0.2)], 0),
                TokenRecord::new(" text", vec![(" text".into(), 0.7), ("y".into(), 0.3)], 1),
            ],
        );
        let backend = MockBackend::new(vec![s]);
        let scored = backend.rescore("m", "off-script text", 5).unwrap();
        assert_eq!(scored.len(), 2);
        assert!(scored[0].1.is_none());
        assert_eq!(scored[1].1.as_ref().unwrap()[0].0, " text");
    }

    #[test]
    fn rescore_greedy_top1_matches_surfaces() {
        let backend = MockBackend::new(vec![script("m", &["a", " b", " c"])]);
        let scored = backend.rescore("m", "a b c", 5).unwrap();
        for (surface, top) in scored.iter().skip(1) {
            assert_eq!(&top.as_ref().unwrap()[0].0, surface);
        }
    }

    #[test]
    fn mock_client_round_trip() {
        let backend = Arc::new(MockBackend::new(vec![script("m", &["p", " a", " b"])]));
        let client = MockClient::new(backend, "m");
        let opts = GenerateOptions {
            stop_surfaces: vec![],
            max_tokens: 10,
            sampling: Default::default(),
        };
        let one = client.generate("p", &opts).unwrap();
        let two = client.generate("p", &opts).unwrap();
        assert_eq!(one, two);
        assert_eq!(one.usage.prompt_tokens, 1);
        assert_eq!(one.usage.completion_tokens, 2);
        assert!(client.health_check().is_ok());
        assert!(MockClient::new(client.backend.clone(), "nope")
            .health_check()
            .is_err());
    }

    #[test]
    fn all_large_speedup_is_one() {
        let attribution = vec![Producer::Large; 100];
        let report =
            simulate_latency(&attribution, &cost(0.02, 0.005, 0.0, 0.0), None).unwrap();
        assert!((report.speedup_vs_large_only - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mixed_speedup_matches_hand_arithmetic() {
        // 70% large, 30% small, small 4x faster, zero overheads:
        // 1 / (0.7 + 0.3/4) = 1.2903225806451613
        let mut attribution = vec![Producer::Large; 700];
        attribution.extend(vec![Producer::Small; 300]);
        let report = simulate_latency(&attribution, &cost(1.0, 0.25, 0.0, 0.0), None).unwrap();
        assert!((report.speedup_vs_large_only - 1.290_322_580_645_161_3).abs() < 1e-9);
    }

    #[test]
    fn spec_profile_limiting_case() {
        let attribution = vec![Producer::Large; 300];
        let profile = SpecDecodeProfile {
            mean_accepted_span: 3.0,
            verify_cost: 1.0,
            draft_cost_per_token: 0.0,
        };
        let report =
            simulate_latency(&attribution, &cost(1.0, 0.25, 0.0, 0.0), Some(&profile)).unwrap();
        assert!((report.speedup_vs_large_only - 3.0).abs() < 1e-12);
    }

    #[test]
    fn equal_costs_zero_overhead_is_identity() {
        let mut attribution = vec![Producer::Large; 13];
        attribution.extend(vec![Producer::Small; 29]);
        attribution.extend(vec![Producer::Large; 7]);
        let report = simulate_latency(&attribution, &cost(1.0, 1.0, 0.0, 0.0), None).unwrap();
        assert!((report.speedup_vs_large_only - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bad_cost_models_rejected() {
        let attribution = vec![Producer::Large];
        for bad in [
            cost(0.0, 1.0, 0.0, 0.0),
            cost(1.0, -1.0, 0.0, 0.0),
            cost(1.0, 1.0, -0.1, 0.0),
            cost(1.0, 1.0, 0.0, -0.1),
        ] {
            assert!(matches!(
                simulate_latency(&attribution, &bad, None).unwrap_err(),
                Error::BadCostModel(_)
            ));
        }
        let profile = SpecDecodeProfile {
            mean_accepted_span: 0.5,
            verify_cost: 1.0,
            draft_cost_per_token: 0.0,
        };
        assert!(matches!(
            simulate_latency(&attribution, &cost(1.0, 1.0, 0.0, 0.0), Some(&profile)).unwrap_err(),
            Error::BadCostModel(_)
        ));
    }

    #[test]
    fn empty_attribution_rejected() {
        assert!(matches!(
            simulate_latency(&[], &cost(1.0, 1.0, 0.0, 0.0), None).unwrap_err(),
            Error::EmptyInput(_)
        ));
    }

    #[test]
    fn fragmenting_large_segments_never_speeds_up() {
        let profile = SpecDecodeProfile {
            mean_accepted_span: 3.0,
            verify_cost: 1.0,
            draft_cost_per_token: 0.1,
        };
        let cost = cost(1.0, 0.25, 0.01, 0.001);
        let segments = vec![
            (Producer::Large, 9),
            (Producer::Small, 4),
            (Producer::Large, 7),
        ];
        let fragmented: Vec<(Producer, usize)> = segments
            .iter()
            .flat_map(|&(p, len)| match p {
                Producer::Large => vec![(p, 1); len],
                Producer::Small => vec![(p, len)],
            })
            .collect();
        let whole = simulate_latency_segments(&segments, &cost, Some(&profile)).unwrap();
        let split = simulate_latency_segments(&fragmented, &cost, Some(&profile)).unwrap();
        assert!(split.total_latency >= whole.total_latency);
    }

    proptest! {
        #[test]
        fn latency_monotone_in_each_cost(
            tokens in proptest::collection::vec(prop_oneof![Just(Producer::Large), Just(Producer::Small)], 1..80),
            bump_idx in 0usize..4,
        ) {
            let base = cost(0.02, 0.005, 0.003, 0.0001);
            let mut bumped = base;
            match bump_idx {
                0 => bumped.large_cost_per_token *= 2.0,
                1 => bumped.small_cost_per_token *= 2.0,
                2 => bumped.switch_overhead *= 2.0,
                _ => bumped.prefill_cost_per_token *= 2.0,
            }
            let before = simulate_latency(&tokens, &base, None).unwrap();
            let after = simulate_latency(&tokens, &bumped, None).unwrap();
            prop_assert!(after.total_latency >= before.total_latency - 1e-15);
        }

        #[test]
        fn served_token_count_bounded(
            max_tokens in 0usize..6,
            stop_at in 0usize..8,
        ) {
            let surfaces: Vec<String> = (0..8).map(|i| format!(" t{i}")).collect();
            let mut tokens: Vec<&str> = surfaces.iter().map(String::as_str).collect();
            tokens.insert(0, "p");
            let backend = MockBackend::new(vec![script("m", &tokens)]);
            let stop = vec![format!(" t{stop_at}")];
            let served = backend.generate("m", "p", &stop, max_tokens, 5, true).unwrap();
            // Bounded by max_tokens plus the stop surface span (one token here).
            prop_assert!(served.tokens.len() <= max_tokens + 1);
        }
    }
}

//! Deployment metrics over session transcripts: large-model utilization,
//! switch counts, prefill totals, and answer-consistency rates.
//!
//! Utilization is counted over generated tokens only — the prompt is
//! excluded, since the statistic characterizes generation behavior.
//! Synthetic stop-surface records attribute to the model whose stop
//! fired: the large model "generated" the cue that halted it.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::switcher::{SwitchDirection, Transcript};
use crate::trace::Producer;

/// Per-session accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStats {
    pub total_tokens: usize,
    pub large_tokens: usize,
    pub small_tokens: usize,
    pub switch_count_by_direction: BTreeMap<SwitchDirection, usize>,
    pub prefill_tokens_by_model: BTreeMap<String, usize>,
    /// Fraction of generated tokens produced by the large model.
    pub utilization: f64,
}

/// Fraction of generated tokens produced by the large model.
pub fn utilization(transcript: &Transcript) -> Result<f64> {
    if transcript.tokens.is_empty() {
        return Err(Error::EmptyTranscript);
    }
    let large = transcript
        .tokens
        .iter()
        .filter(|t| t.producer == Producer::Large)
        .count();
    Ok(large as f64 / transcript.tokens.len() as f64)
}

/// Full per-session stats from a transcript.
pub fn session_stats(transcript: &Transcript) -> Result<SessionStats> {
    let utilization = utilization(transcript)?;
    let large_tokens = transcript
        .tokens
        .iter()
        .filter(|t| t.producer == Producer::Large)
        .count();
    let mut switch_count_by_direction = BTreeMap::new();
    for event in &transcript.events {
        *switch_count_by_direction.entry(event.direction).or_insert(0) += 1;
    }
    Ok(SessionStats {
        total_tokens: transcript.tokens.len(),
        large_tokens,
        small_tokens: transcript.tokens.len() - large_tokens,
        switch_count_by_direction,
        prefill_tokens_by_model: transcript.stats.prefill_tokens_by_model.clone(),
        utilization,
    })
}

/// Exact-match rate between two equal-length answer lists. Answers are
/// expected pre-normalized (see the eval harness).
pub fn matching_rate<T: PartialEq>(answers_ref: &[T], answers_test: &[T]) -> Result<f64> {
    if answers_ref.len() != answers_test.len() {
        return Err(Error::MisalignedInputs {
            left: answers_ref.len(),
            right: answers_test.len(),
            context: "reference vs test answers".into(),
        });
    }
    if answers_ref.is_empty() {
        return Err(Error::EmptyInput("answer lists".into()));
    }
    let matches = answers_ref
        .iter()
        .zip(answers_test)
        .filter(|(a, b)| a == b)
        .count();
    Ok(matches as f64 / answers_ref.len() as f64)
}

/// Mean and population standard deviation of one metric across sessions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Some(Self {
            mean,
            std: var.sqrt(),
            n,
        })
    }
}

/// Corpus summary: mean ± std per metric over sessions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub sessions: usize,
    pub per_metric: BTreeMap<String, MeanStd>,
}

/// Aggregate session stats across a corpus. Error bars are the
/// population standard deviation over sessions.
pub fn aggregate(stats_list: &[SessionStats]) -> Result<CorpusSummary> {
    if stats_list.is_empty() {
        return Err(Error::EmptyInput("session stats".into()));
    }
    let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut push = |name: &str, value: f64| {
        per_metric.entry(name.to_string()).or_default().push(value);
    };
    for stats in stats_list {
        push("total_tokens", stats.total_tokens as f64);
        push("large_tokens", stats.large_tokens as f64);
        push("small_tokens", stats.small_tokens as f64);
        push("utilization", stats.utilization);
        for direction in [
            SwitchDirection::LargeToSmall,
            SwitchDirection::SmallToLarge,
            SwitchDirection::ToAnswerStage,
        ] {
            push(
                &format!("switches_{direction:?}"),
                stats
                    .switch_count_by_direction
                    .get(&direction)
                    .copied()
                    .unwrap_or(0) as f64,
            );
        }
        for (model, prefill) in &stats.prefill_tokens_by_model {
            push(&format!("prefill_tokens_{model}"), *prefill as f64);
        }
    }
    Ok(CorpusSummary {
        sessions: stats_list.len(),
        per_metric: per_metric
            .into_iter()
            .map(|(name, values)| {
                let summary = MeanStd::from_values(&values).expect("non-empty by construction");
                (name, summary)
            })
            .collect(),
    })
}

/// Aligned-column text rendering of a corpus summary, one metric per row.
pub fn render_summary_table(summary: &CorpusSummary, extra: &BTreeMap<String, MeanStd>) -> String {
    let mut rows: Vec<(String, MeanStd)> = summary
        .per_metric
        .iter()
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    rows.extend(extra.iter().map(|(k, v)| (k.clone(), *v)));
    let name_width = rows
        .iter()
        .map(|(name, _)| name.len())
        .chain(std::iter::once("metric".len()))
        .max()
        .unwrap_or(6);
    let mut out = String::new();
    out.push_str(&format!(
        "{:<name_width$}  {:>12}  {:>12}  {:>5}\n",
        "metric", "mean", "std", "n"
    ));
    for (name, ms) in rows {
        out.push_str(&format!(
            "{name:<name_width$}  {:>12.4}  {:>12.4}  {:>5}\n",
            ms.mean, ms.std, ms.n
        ));
    }
    out
}

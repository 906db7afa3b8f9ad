//! Offline switch-cue selection.
//!
//! For every occurrence of a candidate cue in the calibration traces we
//! take the mean margin from the cue position to the next sentence
//! boundary (both ends inclusive) under the scoring model, then compare
//! each cue's average against the global token-level margin. A cue whose
//! post-sentence mean clears the global mean by at least one standard
//! error — the global margin's standard error, pooled over all token
//! positions — becomes a switch cue. The resulting surface set is fixed
//! at deployment time.
//!
//! By default margins come from rescoring the large model's traces under
//! the small model, matching the deployment question ("is this easy for
//! the small model to continue?"); scoring under the trace's own
//! recorded probabilities is available for margin-profiling analyses.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::client::{GenerateOptions, ModelClient, SamplingParams};
use crate::cues::{self, CueOccurrence, CuePool};
use crate::error::{Error, Result};
use crate::margin::{margins_from_trace, MarginSeries, MarginStats};
use crate::trace::{Trace, TokenRecord};
use crate::util::parallel_map;

/// Aggregated post-sentence margin for one cue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueStats {
    pub cue_canonical: String,
    pub occurrence_count: usize,
    pub post_sentence_mean: f64,
    pub post_sentence_std_err: f64,
}

/// One row of the selection report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueReportEntry {
    #[serde(flatten)]
    pub stats: CueStats,
    pub selected: bool,
}

/// The calibrated, model-pair-specific stop-surface set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwitchCueSet {
    /// `(large_id, small_id)`.
    pub model_pair: (String, String),
    pub surfaces: BTreeSet<String>,
    #[serde(rename = "report")]
    pub selection_report: Vec<CueReportEntry>,
    #[serde(rename = "global")]
    pub global_stats: MarginStats,
}

impl SwitchCueSet {
    pub fn from_json_str(input: &str) -> Result<Self> {
        Ok(serde_json::from_str(input)?)
    }

    pub fn from_json_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn selected_canonicals(&self) -> Vec<&str> {
        self.selection_report
            .iter()
            .filter(|e| e.selected)
            .map(|e| e.stats.cue_canonical.as_str())
            .collect()
    }
}

/// Mean margin from the cue position to the next sentence boundary, both
/// ends inclusive. Synthetic records are excluded from the window; the
/// result is `None` when every window position is synthetic (possible
/// only for a cue sitting on a synthetic token at the boundary).
pub fn post_sentence_margin(
    series: &MarginSeries,
    trace: &Trace,
    occ: &CueOccurrence,
) -> Result<Option<f64>> {
    if series.len() != trace.len() {
        return Err(Error::MisalignedInputs {
            left: trace.len(),
            right: series.len(),
            context: "trace vs margin series".into(),
        });
    }
    if occ.token_position >= trace.len() {
        return Err(Error::BadPosition {
            position: occ.token_position,
            len: trace.len(),
        });
    }
    let end = cues::next_sentence_end(trace, occ.token_position)?;
    let last = end.min(trace.len() - 1);
    let window = (occ.token_position..=last).filter(|&i| !trace.tokens[i].synthetic);
    let values: Vec<f64> = window.map(|i| series.values[i]).collect();
    if values.is_empty() {
        return Ok(None);
    }
    Ok(Some(values.iter().sum::<f64>() / values.len() as f64))
}

/// Per-cue mean and standard error of post-sentence margins across all
/// trace/series pairs. Cues with zero occurrences are omitted; output is
/// sorted by canonical so aggregation order never shows in results.
pub fn aggregate_cue_stats(
    pairs: &[(Trace, MarginSeries)],
    pool: &CuePool,
) -> Result<Vec<CueStats>> {
    let mut per_cue: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (trace, series) in pairs {
        if series.len() != trace.len() {
            return Err(Error::MisalignedInputs {
                left: trace.len(),
                right: series.len(),
                context: "trace vs margin series".into(),
            });
        }
        for occ in cues::find_occurrences(trace, pool) {
            if let Some(margin) = post_sentence_margin(series, trace, &occ)? {
                per_cue.entry(occ.cue_canonical).or_default().push(margin);
            }
        }
    }
    Ok(per_cue
        .into_iter()
        .map(|(canonical, margins)| {
            let stats = MarginStats::from_values(margins.iter().copied())
                .expect("per-cue margin list is non-empty");
            CueStats {
                cue_canonical: canonical,
                occurrence_count: margins.len(),
                post_sentence_mean: stats.mean,
                post_sentence_std_err: stats.std_err,
            }
        })
        .collect())
}

/// Select cues whose post-sentence mean is at least the global mean plus
/// one standard error and which occur at least `min_count` times.
///
/// The report is ordered by descending post-sentence mean (ties break on
/// the canonical); surfaces are the union of the selected canonicals'
/// variants, taken from the pool entry when present so custom extra
/// variants survive.
pub fn select_switch_cues(
    stats: &[CueStats],
    global: &MarginStats,
    min_count: usize,
    model_pair: (String, String),
    pool: &CuePool,
) -> Result<SwitchCueSet> {
    if global.n < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: global.n,
        });
    }
    if stats.is_empty() {
        warn!("empty cue statistics: selection degenerates to an empty switch cue set");
    }
    let threshold = global.selection_threshold();

    let mut report: Vec<CueReportEntry> = stats
        .iter()
        .map(|s| CueReportEntry {
            selected: s.occurrence_count >= min_count && s.post_sentence_mean >= threshold,
            stats: s.clone(),
        })
        .collect();
    report.sort_by(|a, b| {
        b.stats
            .post_sentence_mean
            .partial_cmp(&a.stats.post_sentence_mean)
            .expect("margins are finite")
            .then_with(|| a.stats.cue_canonical.cmp(&b.stats.cue_canonical))
    });

    let mut surfaces = BTreeSet::new();
    for entry in report.iter().filter(|e| e.selected) {
        match pool.entry(&entry.stats.cue_canonical) {
            Some(pool_entry) => surfaces.extend(pool_entry.variants.iter().cloned()),
            None => surfaces.extend(cues::expand_variants(&entry.stats.cue_canonical)?),
        }
    }

    Ok(SwitchCueSet {
        model_pair,
        surfaces,
        selection_report: report,
        global_stats: *global,
    })
}

/// Which model's probabilities drive selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreUnder {
    /// Rescore large-model traces under the small model (deployment
    /// default: measures how easy continuations are for the model that
    /// will take them over).
    Small,
    /// Use the probabilities recorded in the traces themselves.
    Large,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationConfig {
    /// Independent reasoning traces generated per prompt.
    pub samples_per_prompt: usize,
    /// Minimum occurrence count for a cue to be eligible; keeps
    /// single-occurrence noise out of the deployed stop-sequence list.
    pub min_count: usize,
    pub score_under: ScoreUnder,
    /// Skip selection and export the full expanded pool (ablation).
    pub all_candidates: bool,
    /// Token cap per generated calibration trace.
    pub generation_max_tokens: usize,
    /// Concurrent prompts during acquisition/rescoring.
    pub jobs: usize,
    pub sampling: SamplingParams,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            samples_per_prompt: 4,
            min_count: 3,
            score_under: ScoreUnder::Small,
            all_candidates: false,
            generation_max_tokens: 4096,
            jobs: 1,
            sampling: SamplingParams::default(),
        }
    }
}

/// Where calibration traces come from.
pub enum TraceSource<'a> {
    /// Pre-recorded large-model traces.
    Recorded(Vec<Trace>),
    /// Generate traces now: `samples_per_prompt` per prompt, no stop
    /// sequences, full reasoning trajectories.
    Endpoints {
        prompts: Vec<String>,
        large_client: &'a dyn ModelClient,
    },
}

/// Calibration output: the cue set plus corpus-level counters for the
/// human-readable report.
#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub cue_set: SwitchCueSet,
    pub trace_count: usize,
    /// Token positions pooled into the global statistics.
    pub pooled_token_count: usize,
    pub occurrence_total: usize,
}

/// End-to-end offline calibration.
///
/// Acquires traces, obtains margins under the configured scoring model,
/// finds cue occurrences, aggregates per-cue post-sentence margins, and
/// thresholds against the global statistics. Deterministic given fixed
/// traces and config; acquisition and rescoring may run concurrently but
/// aggregation is order-insensitive, so output does not depend on
/// completion order.
pub fn calibrate(
    config: &CalibrationConfig,
    source: TraceSource<'_>,
    small_client: Option<&dyn ModelClient>,
    pool: &CuePool,
    model_pair: (String, String),
) -> Result<CalibrationReport> {
    let prompted_traces = acquire_traces(config, source)?;
    info!(traces = prompted_traces.len(), "calibration traces acquired");

    let scored: Vec<(Trace, MarginSeries)> = parallel_map(
        config.jobs,
        prompted_traces,
        |(prompt, trace)| -> Result<(Trace, MarginSeries)> {
            let scored_trace = match config.score_under {
                ScoreUnder::Large => trace,
                ScoreUnder::Small => {
                    let client = small_client.ok_or_else(|| {
                        Error::BadRequest(
                            "score_under = small requires a small-model endpoint".into(),
                        )
                    })?;
                    rescore_trace(client, prompt.as_deref(), &trace)?
                }
            };
            let model = match config.score_under {
                ScoreUnder::Large => model_pair.0.clone(),
                ScoreUnder::Small => model_pair.1.clone(),
            };
            let series = margins_from_trace(&scored_trace, model)?;
            Ok((scored_trace, series))
        },
    )
    .into_iter()
    .collect::<Result<Vec<_>>>()?;

    // Global statistics pool every non-synthetic token position.
    let pooled: Vec<f64> = scored
        .iter()
        .flat_map(|(trace, series)| {
            trace
                .tokens
                .iter()
                .zip(&series.values)
                .filter(|(token, _)| !token.synthetic)
                .map(|(_, &value)| value)
        })
        .collect();
    if pooled.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: pooled.len(),
        });
    }
    let pooled_token_count = pooled.len();
    let global = MarginStats::from_values(pooled)?;

    let stats = aggregate_cue_stats(&scored, pool)?;
    let occurrence_total = stats.iter().map(|s| s.occurrence_count).sum();

    let cue_set = if config.all_candidates {
        let report = stats
            .iter()
            .map(|s| CueReportEntry {
                stats: s.clone(),
                selected: true,
            })
            .collect();
        SwitchCueSet {
            model_pair,
            surfaces: pool.all_surfaces(),
            selection_report: report,
            global_stats: global,
        }
    } else {
        select_switch_cues(&stats, &global, config.min_count, model_pair, pool)?
    };

    Ok(CalibrationReport {
        cue_set,
        trace_count: scored.len(),
        pooled_token_count,
        occurrence_total,
    })
}

fn acquire_traces(
    config: &CalibrationConfig,
    source: TraceSource<'_>,
) -> Result<Vec<(Option<String>, Trace)>> {
    match source {
        TraceSource::Recorded(traces) => Ok(traces.into_iter().map(|t| (None, t)).collect()),
        TraceSource::Endpoints {
            prompts,
            large_client,
        } => {
            if config.samples_per_prompt == 0 {
                return Err(Error::BadRequest("samples_per_prompt must be >= 1".into()));
            }
            let requests: Vec<String> = prompts
                .iter()
                .flat_map(|p| std::iter::repeat_n(p.clone(), config.samples_per_prompt))
                .collect();
            let options = GenerateOptions {
                stop_surfaces: Vec::new(),
                max_tokens: config.generation_max_tokens,
                sampling: config.sampling,
            };
            parallel_map(config.jobs, requests, |prompt| -> Result<_> {
                let result = large_client.generate(&prompt, &options)?;
                Ok((Some(prompt), Trace::new(result.tokens)))
            })
            .into_iter()
            .collect()
        }
    }
}

/// Rescore a trace under the scoring model. When the originating prompt
/// is known the full text is scored for proper conditioning and the
/// prompt-covering records are dropped; the result uses the scoring
/// model's own segmentation of the trace text.
fn rescore_trace(
    client: &dyn ModelClient,
    prompt: Option<&str>,
    trace: &Trace,
) -> Result<Trace> {
    let trace_text = trace.text();
    if trace_text.is_empty() {
        return Ok(Trace::default());
    }
    let full_text = match prompt {
        Some(p) => format!("{p}{trace_text}"),
        None => trace_text,
    };
    let records = client.rescore(&full_text)?;
    let cut = prompt.map_or(0, str::len);
    let mut kept: Vec<TokenRecord> = Vec::new();
    let mut offset = 0usize;
    for record in records {
        let start = offset;
        offset += record.text.len();
        // Skip records covering the prompt; a record straddling the
        // boundary is dropped with it.
        if start >= cut {
            let mut record = record;
            record.position = kept.len();
            kept.push(record);
        }
    }
    Ok(Trace::new(kept))
}

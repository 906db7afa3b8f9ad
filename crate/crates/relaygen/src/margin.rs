//! Token-level probability margins and their aggregate statistics.
//!
//! The margin at a decoding step is the top-1 probability minus the top-2
//! probability. A large margin means the model decisively prefers its
//! next token; a small margin means high local uncertainty. Margins are
//! computed from the per-token top-k probabilities the endpoint reports,
//! never re-derived from logits: served models are treated as black boxes.
//!
//! All operations here are pure functions over immutable inputs and safe
//! to call concurrently.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::Trace;

/// Margins for one trace, one value per token position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginSeries {
    pub values: Vec<f64>,
    /// Identifier of the model whose distributions produced these margins.
    pub source_model: String,
}

impl MarginSeries {
    pub fn new(values: Vec<f64>, source_model: impl Into<String>) -> Self {
        Self {
            values,
            source_model: source_model.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Pooled margin statistics. `std_dev` uses the population divisor `n`:
/// the calibration corpus is treated as the population being profiled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginStats {
    pub mean: f64,
    #[serde(rename = "std")]
    pub std_dev: f64,
    #[serde(rename = "se")]
    pub std_err: f64,
    pub n: usize,
}

impl MarginStats {
    /// Pool raw values. Requires `n >= 1`; callers that need a standard
    /// error for thresholding should require `n >= 2` themselves.
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let values: Vec<f64> = values.into_iter().collect();
        let n = values.len();
        if n == 0 {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let std_dev = var.sqrt();
        Ok(Self {
            mean,
            std_dev,
            std_err: std_dev / (n as f64).sqrt(),
            n,
        })
    }

    /// The switch-cue selection threshold: mean plus one standard error.
    pub fn selection_threshold(&self) -> f64 {
        self.mean + self.std_err
    }
}

/// Validate a top-k probability list: at least two entries, sorted
/// non-increasing, each in `[0, 1]`, total at most `1 + 1e-6`.
fn validate_top_probs(top_probs: &[(String, f64)], position: usize) -> Result<()> {
    if top_probs.len() < 2 {
        return Err(Error::MalformedRecord {
            position,
            reason: format!(
                "need at least 2 top probabilities, got {}; a missing runner-up is an \
                 endpoint configuration error",
                top_probs.len()
            ),
        });
    }
    let mut sum = 0.0;
    for (i, (_, p)) in top_probs.iter().enumerate() {
        if !p.is_finite() || *p < 0.0 || *p > 1.0 {
            return Err(Error::MalformedRecord {
                position,
                reason: format!("probability {p} at rank {i} outside [0, 1]"),
            });
        }
        if i > 0 && *p > top_probs[i - 1].1 {
            return Err(Error::MalformedRecord {
                position,
                reason: format!("probabilities not sorted descending at rank {i}"),
            });
        }
        sum += p;
    }
    if sum > 1.0 + 1e-6 {
        return Err(Error::MalformedRecord {
            position,
            reason: format!("probabilities sum to {sum} > 1"),
        });
    }
    Ok(())
}

/// Probability margin of one position: top-1 minus top-2 probability.
pub fn compute_margin(top_probs: &[(String, f64)]) -> Result<f64> {
    validate_top_probs(top_probs, 0)?;
    Ok(top_probs[0].1 - top_probs[1].1)
}

/// Margin at every position of a trace. Fails with the offending
/// position on the first malformed record.
pub fn margins_from_trace(trace: &Trace, source_model: impl Into<String>) -> Result<MarginSeries> {
    let mut values = Vec::with_capacity(trace.len());
    for (i, token) in trace.tokens.iter().enumerate() {
        validate_top_probs(&token.top_probs, i)?;
        values.push(token.top_probs[0].1 - token.top_probs[1].1);
    }
    Ok(MarginSeries::new(values, source_model))
}

/// Mean, population standard deviation, and standard error over the
/// pooled values of all series. Requires at least two pooled values.
pub fn global_margin_stats(series_list: &[MarginSeries]) -> Result<MarginStats> {
    let total: usize = series_list.iter().map(|s| s.len()).sum();
    if total < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: total,
        });
    }
    MarginStats::from_values(series_list.iter().flat_map(|s| s.values.iter().copied()))
}

/// Centered moving average with truncated windows at the edges. The
/// output has the same length as the input. Plot-ready smoothing for
/// margin-trajectory inspection; `window == 1` is the identity.
pub fn margin_trajectory(series: &MarginSeries, window: usize) -> Result<Vec<f64>> {
    let len = series.len();
    if window == 0 || window > len {
        return Err(Error::BadWindow { window, len });
    }
    let back = (window - 1) / 2;
    let fwd = window / 2;
    let out = (0..len)
        .map(|i| {
            let lo = i.saturating_sub(back);
            let hi = (i + fwd).min(len - 1);
            let slice = &series.values[lo..=hi];
            slice.iter().sum::<f64>() / slice.len() as f64
        })
        .collect();
    Ok(out)
}

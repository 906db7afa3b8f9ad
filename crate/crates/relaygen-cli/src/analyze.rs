//! `relaygen analyze` — plot-ready margin and cue CSVs from traces.

use std::fmt::Write as _;
use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use serde::Serialize;
use tracing::info;

use relaygen::calibration::aggregate_cue_stats;
use relaygen::cues::CuePool;
use relaygen::margin::{margin_trajectory, margins_from_trace, MarginSeries, MarginStats};
use relaygen::Trace;

use crate::common::{load_trace_corpus, with_config_echo, write_atomic, write_json_atomic};

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Trace .jsonl file or directory of them.
    #[arg(long)]
    pub trace: PathBuf,
    /// Moving-average window for the smoothed trajectory column.
    #[arg(long, default_value_t = 1)]
    pub window: usize,
    /// Cue pool override TOML.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Label recorded in the margin series.
    #[arg(long, default_value = "recorded")]
    pub source_model: String,
    /// Output directory.
    #[arg(long, default_value = "out/analysis")]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct ConfigEcho {
    trace: PathBuf,
    window: usize,
    pool: Option<PathBuf>,
    source_model: String,
}

#[derive(Debug, Serialize)]
struct AnalysisSummary {
    traces: usize,
    global: MarginStats,
    threshold: f64,
    cue_rows: usize,
}

pub fn execute(args: &AnalyzeArgs) -> Result<()> {
    let traces = load_trace_corpus(&args.trace)?;
    let pool = match &args.pool {
        Some(path) => CuePool::from_toml_path(path)?,
        None => relaygen::cues::default_pool(),
    };

    let pairs: Vec<(Trace, MarginSeries)> = traces
        .into_iter()
        .map(|trace| {
            let series = margins_from_trace(&trace, &args.source_model)?;
            Ok((trace, series))
        })
        .collect::<relaygen::Result<_>>()?;

    // Per-trace margin trajectory CSVs.
    for (i, (trace, series)) in pairs.iter().enumerate() {
        let mut csv = String::from("pos,margin,smoothed\n");
        let smoothed = if series.is_empty() {
            Vec::new()
        } else {
            let window = args.window.clamp(1, series.len());
            margin_trajectory(series, window)?
        };
        for (pos, (margin, smooth)) in series.values.iter().zip(&smoothed).enumerate() {
            writeln!(csv, "{pos},{margin},{smooth}").expect("write to string");
        }
        debug_assert_eq!(csv.lines().count(), trace.len() + 1);
        write_atomic(&args.out.join(format!("trajectory_{i:03}.csv")), csv.as_bytes())?;
    }

    // Pooled per-cue post-sentence margin table.
    let stats = aggregate_cue_stats(&pairs, &pool)?;
    let pooled: Vec<f64> = pairs
        .iter()
        .flat_map(|(trace, series)| {
            trace
                .tokens
                .iter()
                .zip(&series.values)
                .filter(|(t, _)| !t.synthetic)
                .map(|(_, &v)| v)
        })
        .collect();
    let global = MarginStats::from_values(pooled)?;
    let threshold = global.selection_threshold();
    let mut csv = String::from("cue,count,post_sentence_mean,post_sentence_se,clears_threshold\n");
    for s in &stats {
        writeln!(
            csv,
            "{},{},{},{},{}",
            s.cue_canonical,
            s.occurrence_count,
            s.post_sentence_mean,
            s.post_sentence_std_err,
            s.post_sentence_mean >= threshold
        )
        .expect("write to string");
    }
    write_atomic(&args.out.join("cue_margins.csv"), csv.as_bytes())?;

    let summary = AnalysisSummary {
        traces: pairs.len(),
        global,
        threshold,
        cue_rows: stats.len(),
    };
    let echo = ConfigEcho {
        trace: args.trace.clone(),
        window: args.window,
        pool: args.pool.clone(),
        source_model: args.source_model.clone(),
    };
    write_json_atomic(&args.out.join("summary.json"), &with_config_echo(&summary, &echo)?)?;
    info!(traces = pairs.len(), out = %args.out.display(), "analysis complete");
    Ok(())
}

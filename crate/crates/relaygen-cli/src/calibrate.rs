//! `relaygen calibrate` — offline switch-cue selection.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use tracing::info;

use relaygen::calibration::{
    calibrate, CalibrationConfig, CalibrationReport, ScoreUnder, TraceSource,
};
use relaygen::client::{ModelClient, SamplingParams};
use relaygen::cues::CuePool;

use crate::common::{
    load_prompts, load_trace_corpus, with_config_echo, write_atomic, write_json_atomic,
    EndpointArgs, EndpointsFile, SamplingArgs, Side,
};

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    /// TOML config file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prompt file (one per line): generate calibration traces from the
    /// large endpoint.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    /// Pre-recorded trace corpus (a .jsonl file or a directory of them)
    /// instead of endpoint generation.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    /// Independent traces generated per prompt.
    #[arg(long)]
    pub samples_per_prompt: Option<usize>,
    /// Minimum occurrences for a cue to be eligible.
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Which model's probabilities drive selection.
    #[arg(long, value_parser = parse_score_under)]
    pub score_under: Option<ScoreUnder>,
    /// Ablation: skip selection and export the full expanded pool.
    #[arg(long)]
    pub all_candidates: bool,
    /// Token cap per generated calibration trace.
    #[arg(long)]
    pub generation_max_tokens: Option<usize>,
    /// Cue pool override (TOML [[cue]] tables); defaults to the built-in pool.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    /// Concurrent prompts.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory for cue_set.json and calibration_report.txt.
    #[arg(long, default_value = "out/calibration")]
    pub out: PathBuf,
    #[command(flatten)]
    pub endpoints: EndpointArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

fn parse_score_under(s: &str) -> std::result::Result<ScoreUnder, String> {
    match s {
        "small" => Ok(ScoreUnder::Small),
        "large" => Ok(ScoreUnder::Large),
        other => Err(format!("expected 'small' or 'large', got {other:?}")),
    }
}

/// Calibration config file shape.
#[derive(Debug, Clone, Default, Deserialize)]
struct CalibrateFile {
    prompts_path: Option<PathBuf>,
    traces_path: Option<PathBuf>,
    samples_per_prompt: Option<usize>,
    min_count: Option<usize>,
    score_under: Option<ScoreUnder>,
    all_candidates: Option<bool>,
    generation_max_tokens: Option<usize>,
    pool_path: Option<PathBuf>,
    jobs: Option<usize>,
    #[serde(default)]
    endpoints: EndpointsFile,
    sampling: Option<SamplingParams>,
}

#[derive(Debug, Serialize)]
struct ConfigEcho {
    traces: Option<PathBuf>,
    prompts: Option<PathBuf>,
    samples_per_prompt: usize,
    min_count: usize,
    score_under: ScoreUnder,
    all_candidates: bool,
    generation_max_tokens: usize,
    pool: Option<PathBuf>,
    jobs: usize,
    sampling: SamplingParams,
    endpoints: serde_json::Value,
}

pub fn execute(args: &CalibrateArgs) -> Result<()> {
    let file: CalibrateFile = match &args.config {
        Some(path) => toml::from_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => CalibrateFile::default(),
    };

    let traces_path = args.traces.clone().or(file.traces_path);
    let prompts_path = args.prompts.clone().or(file.prompts_path);
    let pool_path = args.pool.clone().or(file.pool_path);
    let config = CalibrationConfig {
        samples_per_prompt: args
            .samples_per_prompt
            .or(file.samples_per_prompt)
            .unwrap_or(4),
        min_count: args.min_count.or(file.min_count).unwrap_or(3),
        score_under: args
            .score_under
            .or(file.score_under)
            .unwrap_or(ScoreUnder::Small),
        all_candidates: args.all_candidates || file.all_candidates.unwrap_or(false),
        generation_max_tokens: args
            .generation_max_tokens
            .or(file.generation_max_tokens)
            .unwrap_or(4096),
        jobs: args.jobs.or(file.jobs).unwrap_or(1),
        sampling: args.sampling.resolve(file.sampling.as_ref()),
    };

    let pool = match &pool_path {
        Some(path) => CuePool::from_toml_path(path)?,
        None => relaygen::cues::default_pool(),
    };

    let large = args.endpoints.resolve(Side::Large, &file.endpoints);
    let small = args.endpoints.resolve(Side::Small, &file.endpoints);
    let model_pair = (large.model.clone(), small.model.clone());

    let small_client = match config.score_under {
        ScoreUnder::Small => Some(args.endpoints.client(&small)?),
        ScoreUnder::Large => None,
    };
    let small_ref: Option<&dyn ModelClient> =
        small_client.as_ref().map(|c| c as &dyn ModelClient);

    let report = match (&traces_path, &prompts_path) {
        (Some(traces), None) => {
            let corpus = load_trace_corpus(traces)?;
            info!(traces = corpus.len(), "calibrating from recorded traces");
            calibrate(
                &config,
                TraceSource::Recorded(corpus),
                small_ref,
                &pool,
                model_pair,
            )?
        }
        (None, Some(prompts)) => {
            let prompts = load_prompts(prompts)?;
            let large_client = args.endpoints.client(&large)?;
            info!(prompts = prompts.len(), "calibrating from endpoint generation");
            calibrate(
                &config,
                TraceSource::Endpoints {
                    prompts,
                    large_client: &large_client,
                },
                small_ref,
                &pool,
                model_pair,
            )?
        }
        (Some(_), Some(_)) => bail!("--traces and --prompts are mutually exclusive"),
        (None, None) => bail!("one of --traces or --prompts is required"),
    };

    let echo = ConfigEcho {
        traces: traces_path,
        prompts: prompts_path,
        samples_per_prompt: config.samples_per_prompt,
        min_count: config.min_count,
        score_under: config.score_under,
        all_candidates: config.all_candidates,
        generation_max_tokens: config.generation_max_tokens,
        pool: pool_path,
        jobs: config.jobs,
        sampling: config.sampling,
        endpoints: serde_json::json!({ "large": large, "small": small }),
    };

    let cue_set_json = with_config_echo(&report.cue_set, &echo)?;
    let cue_set_path = args.out.join("cue_set.json");
    write_json_atomic(&cue_set_path, &cue_set_json)?;
    write_atomic(
        &args.out.join("calibration_report.txt"),
        render_report(&report).as_bytes(),
    )?;
    info!(
        selected = report.cue_set.selected_canonicals().len(),
        surfaces = report.cue_set.surfaces.len(),
        out = %cue_set_path.display(),
        "calibration complete"
    );
    println!("{}", render_report(&report));
    Ok(())
}

fn render_report(report: &CalibrationReport) -> String {
    let g = &report.cue_set.global_stats;
    let mut out = String::new();
    out.push_str("calibration report\n");
    out.push_str("==================\n");
    out.push_str(&format!(
        "model pair: {} / {}\n",
        report.cue_set.model_pair.0, report.cue_set.model_pair.1
    ));
    out.push_str(&format!("traces: {}\n", report.trace_count));
    out.push_str(&format!(
        "pooled token positions: {}\n",
        report.pooled_token_count
    ));
    out.push_str(&format!("cue occurrences: {}\n", report.occurrence_total));
    out.push_str(&format!(
        "global margin: mean {:.6}  std {:.6}  se {:.6}  (n = {})\n",
        g.mean, g.std_dev, g.std_err, g.n
    ));
    out.push_str(&format!(
        "selection threshold (mean + 1 se): {:.6}\n\n",
        g.selection_threshold()
    ));
    out.push_str(&format!(
        "{:<16} {:>7} {:>20} {:>12}  selected\n",
        "cue", "count", "post-sentence mean", "se"
    ));
    for entry in &report.cue_set.selection_report {
        out.push_str(&format!(
            "{:<16} {:>7} {:>20.6} {:>12.6}  {}\n",
            entry.stats.cue_canonical,
            entry.stats.occurrence_count,
            entry.stats.post_sentence_mean,
            entry.stats.post_sentence_std_err,
            if entry.selected { "yes" } else { "no" },
        ));
    }
    out.push_str(&format!(
        "\nstop surfaces ({}): {:?}\n",
        report.cue_set.surfaces.len(),
        report.cue_set.surfaces.iter().collect::<Vec<_>>()
    ));
    out
}

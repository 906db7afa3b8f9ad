//! `relaygen run` — one switching session against live endpoints.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};
use tracing::info;

use relaygen::calibration::SwitchCueSet;
use relaygen::client::SamplingParams;
use relaygen::margin::MarginStats;
use relaygen::metrics;
use relaygen::switcher::{self, Budgets};

use crate::common::{
    with_config_echo, write_json_atomic, EndpointArgs, EndpointsFile, SamplingArgs, Side,
};

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML session config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Prompt text.
    #[arg(long, short = 'p')]
    pub prompt: Option<String>,
    /// Read the prompt from a file instead.
    #[arg(long, short = 'f', conflicts_with = "prompt")]
    pub prompt_file: Option<PathBuf>,
    /// Calibrated cue-set JSON; omit for degenerate large-only switching
    /// (only `</think>` triggers a handoff).
    #[arg(long)]
    pub cues: Option<PathBuf>,
    /// Generated-token budget for the whole session.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    /// Cap per small-model reasoning segment.
    #[arg(long)]
    pub max_small_segment: Option<usize>,
    /// Transcript output path.
    #[arg(long, default_value = "out/transcript.json")]
    pub out: PathBuf,
    #[command(flatten)]
    pub endpoints: EndpointArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Clone, Default, Deserialize)]
struct RunFile {
    cue_set_path: Option<PathBuf>,
    budgets: Option<BudgetsFile>,
    sampling: Option<SamplingParams>,
    #[serde(default)]
    endpoints: EndpointsFile,
}

#[derive(Debug, Clone, Copy, Deserialize)]
struct BudgetsFile {
    max_total_tokens: Option<usize>,
    max_small_segment_tokens: Option<usize>,
}

#[derive(Debug, Serialize)]
struct ConfigEcho {
    cues: Option<PathBuf>,
    budgets: Budgets,
    sampling: SamplingParams,
    endpoints: serde_json::Value,
}

pub fn execute(args: &RunArgs) -> Result<()> {
    let file: RunFile = match &args.config {
        Some(path) => toml::from_str(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )?,
        None => RunFile::default(),
    };

    let prompt = match (&args.prompt, &args.prompt_file) {
        (Some(p), None) => p.clone(),
        (None, Some(f)) => std::fs::read_to_string(f)
            .with_context(|| format!("reading {}", f.display()))?,
        (None, None) => bail!("one of --prompt or --prompt-file is required"),
        (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
    };

    let cues_path = args.cues.clone().or(file.cue_set_path);
    let cue_set = match &cues_path {
        Some(path) => SwitchCueSet::from_json_path(path)
            .with_context(|| format!("loading cue set {}", path.display()))?,
        None => SwitchCueSet {
            model_pair: (String::new(), String::new()),
            surfaces: Default::default(),
            selection_report: Vec::new(),
            global_stats: MarginStats {
                mean: 0.0,
                std_dev: 0.0,
                std_err: 0.0,
                n: 2,
            },
        },
    };

    let defaults = Budgets::default();
    let budgets = Budgets {
        max_total_tokens: args
            .max_tokens
            .or(file.budgets.and_then(|b| b.max_total_tokens))
            .unwrap_or(defaults.max_total_tokens),
        max_small_segment_tokens: args
            .max_small_segment
            .or(file.budgets.and_then(|b| b.max_small_segment_tokens))
            .unwrap_or(defaults.max_small_segment_tokens),
    };
    let sampling = args.sampling.resolve(file.sampling.as_ref());

    let large = args.endpoints.resolve(Side::Large, &file.endpoints);
    let small = args.endpoints.resolve(Side::Small, &file.endpoints);
    let large_client = args.endpoints.client(&large)?;
    let small_client = args.endpoints.client(&small)?;

    let session = switcher::start_session(&prompt, &cue_set, budgets)?.with_sampling(sampling);
    let transcript = switcher::run(session, &large_client, &small_client)?;

    let echo = ConfigEcho {
        cues: cues_path,
        budgets,
        sampling,
        endpoints: serde_json::json!({ "large": large, "small": small }),
    };
    let mut report = with_config_echo(&transcript, &echo)?;
    if let Ok(stats) = metrics::session_stats(&transcript) {
        report
            .as_object_mut()
            .expect("transcript serializes to an object")
            .insert("metrics".to_string(), serde_json::to_value(&stats)?);
    }
    write_json_atomic(&args.out, &report)?;
    info!(
        tokens = transcript.stats.total_tokens,
        switches = transcript.events.len(),
        out = %args.out.display(),
        "session complete"
    );
    if let Some(reason) = &transcript.stats.aborted {
        bail!("session aborted: {reason} (partial transcript written)");
    }
    Ok(())
}

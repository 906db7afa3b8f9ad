//! `relaygen delegation-test` — answer-stage delegation consistency.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use tracing::info;

use relaygen::evalharness::{self, AnswerMode, DelegationConfig};

use crate::common::{
    with_config_echo, write_atomic, write_json_atomic, EndpointArgs, EndpointsFile, SamplingArgs,
    Side,
};

#[derive(Debug, Args)]
pub struct DelegationArgs {
    /// Problem set JSONL: {id, prompt, answer}.
    #[arg(long)]
    pub problems: PathBuf,
    /// Cap for the reasoning prefix generation.
    #[arg(long, default_value_t = 32_768)]
    pub reasoning_max_tokens: usize,
    /// Cap for each answer branch.
    #[arg(long, default_value_t = 4096)]
    pub answer_max_tokens: usize,
    #[arg(long, default_value = "boxed", value_parser = crate::bench_answer_mode)]
    pub answer_mode: AnswerMode,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long, default_value = "out/delegation")]
    pub out: PathBuf,
    #[command(flatten)]
    pub endpoints: EndpointArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

#[derive(Debug, Serialize)]
struct ConfigEcho {
    problems: PathBuf,
    reasoning_max_tokens: usize,
    answer_max_tokens: usize,
    answer_mode: AnswerMode,
    jobs: usize,
    endpoints: serde_json::Value,
}

pub fn execute(args: &DelegationArgs) -> Result<()> {
    let problems = evalharness::load_problems_path(&args.problems)
        .with_context(|| format!("loading {}", args.problems.display()))?;
    let none_file = EndpointsFile::default();
    let large = args.endpoints.resolve(Side::Large, &none_file);
    let small = args.endpoints.resolve(Side::Small, &none_file);
    let large_client = args.endpoints.client(&large)?;
    let small_client = args.endpoints.client(&small)?;

    let config = DelegationConfig {
        reasoning_max_tokens: args.reasoning_max_tokens,
        answer_max_tokens: args.answer_max_tokens,
        sampling: args.sampling.resolve(None),
        answer_mode: args.answer_mode,
        jobs: args.jobs,
    };
    let report = evalharness::answer_delegation_experiment(
        &problems,
        &large_client,
        &small_client,
        &config,
    )?;

    let echo = ConfigEcho {
        problems: args.problems.clone(),
        reasoning_max_tokens: args.reasoning_max_tokens,
        answer_max_tokens: args.answer_max_tokens,
        answer_mode: args.answer_mode,
        jobs: args.jobs,
        endpoints: serde_json::json!({ "large": large, "small": small }),
    };
    write_json_atomic(
        &args.out.join("delegation_report.json"),
        &with_config_echo(&report, &echo)?,
    )?;

    let mut table = String::new();
    table.push_str("answer-stage delegation consistency\n");
    table.push_str("===================================\n");
    table.push_str(&format!(
        "{:>13} {:>9} {:>15}\n",
        "total_samples", "matches", "matching_rate"
    ));
    table.push_str(&report.render_row());
    table.push('\n');
    if !report.errors.is_empty() {
        table.push_str(&format!(
            "\ncoverage: {} of {} problems completed; {} errored\n",
            report.completed,
            report.attempted,
            report.errors.len()
        ));
    }
    write_atomic(&args.out.join("delegation_report.txt"), table.as_bytes())?;
    println!("{table}");
    info!(
        rate = report.matching_rate,
        out = %args.out.display(),
        "delegation test complete"
    );
    Ok(())
}

//! Command-line pipeline: calibrate switch cues, run switching sessions,
//! benchmark, analyze traces, test answer delegation, and serve the
//! scripted mock backend.

pub mod analyze;
pub mod bench;
pub mod calibrate;
pub mod common;
pub mod delegation;
pub mod mock_serve;
pub mod run;

use anyhow::Result;
use clap::{Parser, Subcommand};

pub(crate) use bench_answer_mode_impl as bench_answer_mode;

/// Clap value parser shared by answer-mode flags.
pub fn bench_answer_mode_impl(
    s: &str,
) -> std::result::Result<relaygen::evalharness::AnswerMode, String> {
    match s {
        "boxed" => Ok(relaygen::evalharness::AnswerMode::Boxed),
        "choice" => Ok(relaygen::evalharness::AnswerMode::Choice),
        other => Err(format!("expected 'boxed' or 'choice', got {other:?}")),
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "relaygen",
    about = "Segment-level runtime model switching between large and small LLM endpoints",
    version
)]
pub struct Cli {
    /// Log filter (e.g. info, relaygen=debug).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Select switch cues offline from calibration traces.
    Calibrate(calibrate::CalibrateArgs),
    /// Run one switching session and write the transcript.
    Run(run::RunArgs),
    /// Run a problem set and report pass@1, utilization, and speedup.
    Bench(bench::BenchArgs),
    /// Emit margin trajectories and per-cue margin tables as CSV.
    Analyze(analyze::AnalyzeArgs),
    /// Compare large- vs small-model answer stages on shared reasoning.
    DelegationTest(delegation::DelegationArgs),
    /// Serve scripted models over the completions wire protocol.
    MockServe(mock_serve::MockServeArgs),
}

pub fn execute(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Calibrate(args) => calibrate::execute(args),
        Command::Run(args) => run::execute(args),
        Command::Bench(args) => bench::execute(args),
        Command::Analyze(args) => analyze::execute(args),
        Command::DelegationTest(args) => delegation::execute(args),
        Command::MockServe(args) => mock_serve::execute(args),
    }
}

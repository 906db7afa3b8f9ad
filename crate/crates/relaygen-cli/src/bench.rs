//! `relaygen bench` — problem-set benchmark with latency accounting.

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use tracing::info;

use relaygen::calibration::SwitchCueSet;
use relaygen::evalharness::{self, AnswerMode, EvalConfig};
use relaygen::margin::MarginStats;
use relaygen::metrics::{self, MeanStd};
use relaygen::mocksim::{simulate_latency, CostModel, SpecDecodeProfile};
use relaygen::switcher::Budgets;

use crate::common::{
    with_config_echo, write_atomic, write_json_atomic, EndpointArgs, EndpointsFile, SamplingArgs,
    Side,
};

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Problem set JSONL: {id, prompt, answer}.
    #[arg(long)]
    pub problems: PathBuf,
    /// Calibrated cue-set JSON.
    #[arg(long)]
    pub cues: Option<PathBuf>,
    /// Runs per problem.
    #[arg(long, default_value_t = 1)]
    pub repeats: usize,
    /// Cost model TOML (per-token seconds); defaults to a 4x-faster
    /// small model with zero overheads.
    #[arg(long)]
    pub cost_model: Option<PathBuf>,
    /// Speculative-decoding profile TOML for re-costing large segments.
    #[arg(long)]
    pub spec_profile: Option<PathBuf>,
    /// Answer extraction mode.
    #[arg(long, default_value = "boxed", value_parser = parse_answer_mode)]
    pub answer_mode: AnswerMode,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long, default_value = "out/bench")]
    pub out: PathBuf,
    #[command(flatten)]
    pub endpoints: EndpointArgs,
    #[command(flatten)]
    pub sampling: SamplingArgs,
}

fn parse_answer_mode(s: &str) -> std::result::Result<AnswerMode, String> {
    match s {
        "boxed" => Ok(AnswerMode::Boxed),
        "choice" => Ok(AnswerMode::Choice),
        other => Err(format!("expected 'boxed' or 'choice', got {other:?}")),
    }
}

fn default_cost_model() -> CostModel {
    CostModel {
        large_cost_per_token: 0.02,
        small_cost_per_token: 0.005,
        switch_overhead: 0.0,
        prefill_cost_per_token: 0.0,
    }
}

#[derive(Debug, Serialize)]
struct ConfigEcho {
    problems: PathBuf,
    cues: Option<PathBuf>,
    repeats: usize,
    answer_mode: AnswerMode,
    cost_model: CostModel,
    spec_profile: Option<SpecDecodeProfile>,
    jobs: usize,
    endpoints: serde_json::Value,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    pass_at_1: f64,
    sessions: usize,
    summary: metrics::CorpusSummary,
    latency: BTreeMap<String, MeanStd>,
    per_problem: Vec<ProblemRow>,
}

#[derive(Debug, Serialize)]
struct ProblemRow {
    problem_id: String,
    correct_fraction: f64,
    utilization_mean: f64,
    speedup_mean: f64,
}

pub fn execute(args: &BenchArgs) -> Result<()> {
    let problems = evalharness::load_problems_path(&args.problems)
        .with_context(|| format!("loading {}", args.problems.display()))?;
    let cue_set = match &args.cues {
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
    let cost_model: CostModel = match &args.cost_model {
        Some(path) => toml::from_str(&std::fs::read_to_string(path)?)?,
        None => default_cost_model(),
    };
    let spec_profile: Option<SpecDecodeProfile> = match &args.spec_profile {
        Some(path) => Some(toml::from_str(&std::fs::read_to_string(path)?)?),
        None => None,
    };

    let none_file = EndpointsFile::default();
    let large = args.endpoints.resolve(Side::Large, &none_file);
    let small = args.endpoints.resolve(Side::Small, &none_file);
    let large_client = args.endpoints.client(&large)?;
    let small_client = args.endpoints.client(&small)?;

    let mut budgets = Budgets::default();
    if let Some(max) = args.max_tokens {
        budgets.max_total_tokens = max;
    }
    let config = EvalConfig {
        samples_per_problem: args.repeats,
        budgets,
        sampling: args.sampling.resolve(None),
        answer_mode: args.answer_mode,
        jobs: args.jobs,
    };
    let runs = evalharness::evaluate(&problems, &large_client, &small_client, &cue_set, &config)?;
    let pass_at_1 = evalharness::pass_at_1(&runs)?;

    let mut session_stats = Vec::new();
    let mut speedups = Vec::new();
    let mut totals = Vec::new();
    let mut per_problem = Vec::new();
    for run in &runs {
        let mut problem_utils = Vec::new();
        let mut problem_speedups = Vec::new();
        for sample in &run.samples {
            let stats = metrics::session_stats(&sample.transcript)?;
            let latency =
                simulate_latency(&sample.transcript.attribution(), &cost_model, spec_profile.as_ref())?;
            problem_utils.push(stats.utilization);
            problem_speedups.push(latency.speedup_vs_large_only);
            speedups.push(latency.speedup_vs_large_only);
            totals.push(latency.total_latency);
            session_stats.push(stats);
        }
        let correct = run.samples.iter().filter(|s| s.correct).count();
        per_problem.push(ProblemRow {
            problem_id: run.problem_id.clone(),
            correct_fraction: correct as f64 / run.samples.len() as f64,
            utilization_mean: MeanStd::from_values(&problem_utils).map_or(0.0, |m| m.mean),
            speedup_mean: MeanStd::from_values(&problem_speedups).map_or(0.0, |m| m.mean),
        });
    }
    let summary = metrics::aggregate(&session_stats)?;
    let mut latency = BTreeMap::new();
    if let Some(ms) = MeanStd::from_values(&speedups) {
        latency.insert("speedup_vs_large_only".to_string(), ms);
    }
    if let Some(ms) = MeanStd::from_values(&totals) {
        latency.insert("total_latency_s".to_string(), ms);
    }

    let report = BenchReport {
        pass_at_1,
        sessions: session_stats.len(),
        summary,
        latency,
        per_problem,
    };
    let echo = ConfigEcho {
        problems: args.problems.clone(),
        cues: args.cues.clone(),
        repeats: args.repeats,
        answer_mode: args.answer_mode,
        cost_model,
        spec_profile,
        jobs: args.jobs,
        endpoints: serde_json::json!({ "large": large, "small": small }),
    };
    write_json_atomic(&args.out.join("bench_report.json"), &with_config_echo(&report, &echo)?)?;

    let table = render_table(&report);
    write_atomic(&args.out.join("bench_report.txt"), table.as_bytes())?;
    println!("{table}");
    info!(out = %args.out.display(), "bench complete");
    Ok(())
}

fn render_table(report: &BenchReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "pass@1: {:.4} over {} sessions\n\n",
        report.pass_at_1, report.sessions
    ));
    out.push_str(&metrics::render_summary_table(&report.summary, &report.latency));
    out.push_str("\nper-problem (mean over repeats):\n");
    out.push_str(&format!(
        "{:<16} {:>9} {:>13} {:>10}\n",
        "problem", "correct", "utilization", "speedup"
    ));
    for row in &report.per_problem {
        out.push_str(&format!(
            "{:<16} {:>9.2} {:>13.4} {:>10.4}\n",
            row.problem_id, row.correct_fraction, row.utilization_mean, row.speedup_mean
        ));
    }
    out
}

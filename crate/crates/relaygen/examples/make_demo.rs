//! Generate a self-contained demo fixture tree (default: ./demo):
//!
//! - scripts/large.jsonl, scripts/small.jsonl — a scripted session for
//!   `relaygen mock-serve`
//! - traces/ — a planted-margin calibration corpus for
//!   `relaygen calibrate --traces` and `relaygen analyze`
//! - prompts.txt, problems.jsonl — inputs for the endpoint-driven
//!   calibrate, bench, and delegation-test commands

use relaygen::fixtures;

fn main() -> relaygen::Result<()> {
    let root = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "demo".to_string());
    let root = std::path::Path::new(&root);

    let traces = fixtures::planted_corpus(2024, 10);
    fixtures::write_corpus_jsonl(&traces, root.join("traces"))?;

    let session = fixtures::two_cue_session("large-m", "small-m");
    std::fs::create_dir_all(root.join("scripts"))?;
    session
        .large_script
        .write_stream_jsonl(std::fs::File::create(root.join("scripts/large.jsonl"))?)?;
    session
        .small_script
        .write_stream_jsonl(std::fs::File::create(root.join("scripts/small.jsonl"))?)?;

    std::fs::write(root.join("prompts.txt"), format!("{}\n", session.prompt))?;
    std::fs::write(
        root.join("problems.jsonl"),
        "{\"id\": \"demo-0\", \"prompt\": \"Solve: \", \"answer\": \"4\"}\n",
    )?;

    println!("demo fixtures written under {}", root.display());
    println!("  scripts/large.jsonl, scripts/small.jsonl  (mock-serve)");
    println!("  traces/trace_000..009.jsonl               (calibrate, analyze)");
    println!("  prompts.txt, problems.jsonl               (calibrate, bench, delegation-test)");
    Ok(())
}

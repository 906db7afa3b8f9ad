//! `relaygen mock-serve` — run the scripted backend as an HTTP server.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::Args;
use tracing::info;

use relaygen::mocksim::http::{serve_blocking, ServeOptions};
use relaygen::mocksim::{MockBackend, Script};

#[derive(Debug, Args)]
pub struct MockServeArgs {
    /// Script JSONL path, repeatable. `model_id=path` assigns the script
    /// to a specific model id; a bare path uses --model-id.
    #[arg(long, required = true)]
    pub script: Vec<String>,
    /// Model id for scripts given without an explicit `model_id=` prefix.
    #[arg(long, default_value = "mock")]
    pub model_id: String,
    #[arg(long, default_value_t = 0)]
    pub port: u16,
    /// Simulated per-token latency in milliseconds.
    #[arg(long, default_value_t = 0)]
    pub latency_ms: u64,
    /// Include matched stop strings in responses instead of stripping
    /// them (the default mirrors common servers).
    #[arg(long)]
    pub include_stop: bool,
}

pub fn execute(args: &MockServeArgs) -> Result<()> {
    let mut scripts = Vec::new();
    for spec in &args.script {
        let (model_id, path) = match spec.split_once('=') {
            Some((id, path)) => (id.to_string(), PathBuf::from(path)),
            None => (args.model_id.clone(), PathBuf::from(spec)),
        };
        let mut script = Script::from_jsonl_path(&model_id, &path)
            .with_context(|| format!("loading script {}", path.display()))?;
        script.per_token_latency = Duration::from_millis(args.latency_ms);
        info!(model = %model_id, tokens = script.stream.len(), path = %path.display(), "script loaded");
        scripts.push(script);
    }
    let backend = Arc::new(MockBackend::new(scripts));
    serve_blocking(
        backend,
        ServeOptions {
            port: args.port,
            include_stop_in_output: args.include_stop,
        },
    )?;
    Ok(())
}

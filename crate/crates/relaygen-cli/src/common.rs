//! Shared CLI plumbing: endpoint resolution, sampling flags, and atomic
//! file output.
//!
//! Configuration precedence everywhere is flags > config file >
//! environment variables > defaults, and every command echoes its
//! resolved configuration into its output for reproducibility.

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use relaygen::client::{
    EndpointConfig, HttpClient, SamplingParams, ENV_API_KEY, ENV_LARGE_URL, ENV_SMALL_URL,
};

/// Endpoint flags shared by commands that talk to model servers.
#[derive(Debug, Clone, Default, Args)]
pub struct EndpointArgs {
    /// Large-model endpoint base URL (falls back to config file, then
    /// RELAYGEN_LARGE_URL).
    #[arg(long)]
    pub large_url: Option<String>,
    /// Small-model endpoint base URL (falls back to config file, then
    /// RELAYGEN_SMALL_URL).
    #[arg(long)]
    pub small_url: Option<String>,
    /// Model id served at the large endpoint.
    #[arg(long)]
    pub large_model: Option<String>,
    /// Model id served at the small endpoint.
    #[arg(long)]
    pub small_model: Option<String>,
    /// Top-k alternatives requested per token (margins need two).
    #[arg(long, default_value_t = 5)]
    pub logprobs_top_k: usize,
    #[arg(long, default_value_t = 3)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 120)]
    pub timeout_secs: u64,
}

/// Endpoint section of a TOML config file.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
pub struct EndpointsFile {
    #[serde(default)]
    pub large: Option<EndpointFileEntry>,
    #[serde(default)]
    pub small: Option<EndpointFileEntry>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct EndpointFileEntry {
    pub base_url: String,
    pub model: String,
}

/// Resolved endpoint pair, ready to echo (API key excluded).
#[derive(Debug, Clone, Serialize)]
pub struct ResolvedEndpoint {
    pub base_url: Option<String>,
    pub model: String,
}

impl EndpointArgs {
    /// Apply flag > config > env > default precedence for one side.
    pub fn resolve(&self, side: Side, file: &EndpointsFile) -> ResolvedEndpoint {
        let (flag_url, flag_model, file_entry, env_var, default_model) = match side {
            Side::Large => (
                &self.large_url,
                &self.large_model,
                &file.large,
                ENV_LARGE_URL,
                "large",
            ),
            Side::Small => (
                &self.small_url,
                &self.small_model,
                &file.small,
                ENV_SMALL_URL,
                "small",
            ),
        };
        let base_url = flag_url
            .clone()
            .or_else(|| file_entry.as_ref().map(|e| e.base_url.clone()))
            .or_else(|| std::env::var(env_var).ok());
        let model = flag_model
            .clone()
            .or_else(|| file_entry.as_ref().map(|e| e.model.clone()))
            .unwrap_or_else(|| default_model.to_string());
        ResolvedEndpoint { base_url, model }
    }

    pub fn client(&self, resolved: &ResolvedEndpoint) -> Result<HttpClient> {
        let base_url = resolved.base_url.as_ref().with_context(|| {
            format!(
                "no endpoint URL for model {:?}: pass --large-url/--small-url, set it in the \
                 config file, or export {ENV_LARGE_URL}/{ENV_SMALL_URL}",
                resolved.model
            )
        })?;
        let mut cfg = EndpointConfig::new(base_url, &resolved.model);
        cfg.api_key = std::env::var(ENV_API_KEY).ok();
        cfg.timeout = Duration::from_secs(self.timeout_secs);
        cfg.max_retries = self.max_retries;
        cfg.logprobs_top_k = self.logprobs_top_k;
        Ok(HttpClient::new(cfg)?)
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Side {
    Large,
    Small,
}

/// Sampling flags; defaults are the recommended reasoning settings.
#[derive(Debug, Clone, Args)]
pub struct SamplingArgs {
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub top_p: Option<f64>,
    #[arg(long)]
    pub top_k: Option<u32>,
}

impl SamplingArgs {
    pub fn resolve(&self, file: Option<&SamplingParams>) -> SamplingParams {
        let base = file.copied().unwrap_or_default();
        SamplingParams {
            temperature: self.temperature.unwrap_or(base.temperature),
            top_p: self.top_p.unwrap_or(base.top_p),
            top_k: self.top_k.unwrap_or(base.top_k),
        }
    }
}

/// Write via a temp file in the destination directory plus rename, so
/// interrupted runs never leave partial artifacts.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(parent) = parent {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating output directory {}", parent.display()))?;
    }
    let dir = parent.unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temp file in {}", dir.display()))?;
    std::io::Write::write_all(&mut tmp, bytes)?;
    tmp.persist(path)
        .with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Serialize a value with a trailing newline and write it atomically.
pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut body = serde_json::to_string_pretty(value)?;
    body.push('\n');
    write_atomic(path, body.as_bytes())
}

/// Attach a `config_echo` field to a serialized report.
pub fn with_config_echo<T: Serialize, E: Serialize>(
    value: &T,
    echo: &E,
) -> Result<serde_json::Value> {
    let mut json = serde_json::to_value(value)?;
    let echo = serde_json::to_value(echo)?;
    json.as_object_mut()
        .context("report must serialize to a JSON object")?
        .insert("config_echo".to_string(), echo);
    Ok(json)
}

/// Load prompts: one per line, blank lines skipped. Only line endings
/// are stripped; trailing spaces are part of the prompt for completion
/// endpoints.
pub fn load_prompts(path: &Path) -> Result<Vec<String>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let prompts: Vec<String> = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect();
    anyhow::ensure!(!prompts.is_empty(), "no prompts in {}", path.display());
    Ok(prompts)
}

/// Load a trace corpus: either one `.jsonl` file or a directory of them
/// (sorted by file name for stable ordering).
pub fn load_trace_corpus(path: &Path) -> Result<Vec<relaygen::Trace>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
            .collect();
        files.sort();
        anyhow::ensure!(
            !files.is_empty(),
            "no .jsonl trace files in {}",
            path.display()
        );
        files
            .iter()
            .map(|f| {
                relaygen::Trace::from_jsonl_path(f)
                    .with_context(|| format!("loading {}", f.display()))
            })
            .collect()
    } else {
        Ok(vec![relaygen::Trace::from_jsonl_path(path)
            .with_context(|| format!("loading {}", path.display()))?])
    }
}

//! Adapter to OpenAI-compatible completion endpoints.
//!
//! Issues generation and echo-rescoring requests with stop sequences and
//! logprobs, retries transient failures with jittered exponential
//! backoff, and normalizes responses into [`TokenRecord`]s. The client is
//! stateless per request and safe to share across sessions.
//!
//! The wire structs in this module define the protocol; the mock server
//! in [`crate::mocksim`] serializes the same structs, so integration
//! tests exercise the exact bytes a real endpoint would produce.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::error::{Error, Result};
use crate::trace::TokenRecord;

/// Environment variable naming the large-model endpoint URL.
pub const ENV_LARGE_URL: &str = "RELAYGEN_LARGE_URL";
/// Environment variable naming the small-model endpoint URL.
pub const ENV_SMALL_URL: &str = "RELAYGEN_SMALL_URL";
/// Environment variable holding the bearer token, if any.
pub const ENV_API_KEY: &str = "RELAYGEN_API_KEY";

const BACKOFF_BASE: Duration = Duration::from_millis(250);
const BACKOFF_CAP: Duration = Duration::from_secs(8);

/// Sampling parameters passed through to the endpoint. Both models in a
/// session share one set. Defaults are the recommended reasoning-model
/// settings: temperature 0.6, top-p 0.95, top-k 20.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    /// Non-standard extension; servers that ignore it are tolerated.
    pub top_k: u32,
}

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.95,
            top_k: 20,
        }
    }
}

/// Why a generation request finished.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    /// A configured stop surface matched; carries the surface.
    StopSurface(String),
    MaxTokens,
    EndOfSequence,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

/// Normalized result of one generation request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResult {
    pub tokens: Vec<TokenRecord>,
    pub stop_reason: StopReason,
    pub usage: Usage,
}

impl GenerateResult {
    /// Concatenated surface text of the emitted tokens.
    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }
}

/// Per-request generation options.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerateOptions {
    pub stop_surfaces: Vec<String>,
    pub max_tokens: usize,
    pub sampling: SamplingParams,
}

/// One served endpoint.
#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_id: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: u32,
    /// Top-k alternatives requested per position; margins need two.
    pub logprobs_top_k: usize,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_id: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model_id: model_id.into(),
            api_key: std::env::var(ENV_API_KEY).ok(),
            timeout: Duration::from_secs(120),
            max_retries: 3,
            logprobs_top_k: 5,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.logprobs_top_k < 2 {
            return Err(Error::BadRequest(format!(
                "logprobs_top_k must be >= 2 (margins need a runner-up), got {}",
                self.logprobs_top_k
            )));
        }
        Ok(())
    }
}

/// Endpoint metadata from the models listing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub model_id: String,
    pub available_models: Vec<String>,
}

/// A text-completion backend. Implemented by [`HttpClient`] for real
/// endpoints and by the in-process scripted double in [`crate::mocksim`].
pub trait ModelClient: Send + Sync {
    fn model_id(&self) -> &str;

    /// Generate up to `max_tokens` tokens after `prompt`, stopping early
    /// on any configured stop surface. The matched stop surface is always
    /// present in the returned tokens regardless of whether the endpoint
    /// strips it.
    fn generate(&self, prompt: &str, options: &GenerateOptions) -> Result<GenerateResult>;

    /// Score an existing text under this model via the endpoint's echo /
    /// prompt-logprobs facility; no sampling is performed. Position 0 has
    /// no conditional distribution on some servers and comes back as a
    /// synthetic record there.
    fn rescore(&self, text: &str) -> Result<Vec<TokenRecord>>;

    /// Confirm the endpoint serves this client's model id.
    fn health_check(&self) -> Result<ModelMetadata>;
}

// ---------------------------------------------------------------------------
// Wire protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionsRequest {
    pub model: String,
    pub prompt: String,
    pub max_tokens: usize,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stop: Vec<String>,
    /// Number of top alternatives to report per position.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<usize>,
    /// Echo the prompt back with logprobs (rescoring mode).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub echo: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompletionsResponse {
    pub model: String,
    pub choices: Vec<Choice>,
    pub usage: WireUsage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Choice {
    pub index: usize,
    pub text: String,
    /// "stop" or "length".
    pub finish_reason: String,
    /// The matched stop string when `finish_reason == "stop"` and a stop
    /// surface (rather than end-of-sequence) fired.
    #[serde(default)]
    pub stop_reason: Option<String>,
    #[serde(default)]
    pub logprobs: Option<WireLogProbs>,
}

/// Per-token logprobs, legacy completions shape. Entries may be `null`
/// at position 0 in echo mode where no conditional distribution exists.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WireLogProbs {
    pub tokens: Vec<String>,
    pub token_logprobs: Vec<Option<f64>>,
    pub top_logprobs: Vec<Option<BTreeMap<String, f64>>>,
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct WireUsage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub total_tokens: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelsResponse {
    pub data: Vec<ModelEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelEntry {
    pub id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorResponse {
    pub error: ErrorBody,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub message: String,
    #[serde(rename = "type")]
    pub kind: String,
}

/// Logprob floor standing in for probability zero; `exp` of it
/// underflows to exactly 0.0, so one-hot distributions round-trip.
pub const LOGPROB_FLOOR: f64 = -9999.0;

/// `ln(p)` clamped so zero probabilities survive JSON.
pub fn prob_to_logprob(p: f64) -> f64 {
    if p <= 0.0 {
        LOGPROB_FLOOR
    } else {
        p.ln().max(LOGPROB_FLOOR)
    }
}

/// Convert one wire logprob map into a descending `(surface, prob)` list.
/// Ties break lexicographically so the order is deterministic.
pub fn top_probs_from_logprobs(map: &BTreeMap<String, f64>) -> Vec<(String, f64)> {
    let mut pairs: Vec<(String, f64)> = map
        .iter()
        .map(|(token, lp)| (token.clone(), lp.exp().clamp(0.0, 1.0)))
        .collect();
    pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    pairs
}

// ---------------------------------------------------------------------------
// HTTP client
// ---------------------------------------------------------------------------

static REQUEST_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Blocking HTTP client for one endpoint.
pub struct HttpClient {
    cfg: EndpointConfig,
    http: reqwest::blocking::Client,
}

impl HttpClient {
    pub fn new(cfg: EndpointConfig) -> Result<Self> {
        cfg.validate()?;
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| Error::Endpoint(format!("failed to build HTTP client: {e}")))?;
        Ok(Self { cfg, http })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// POST with retries on transport errors, 429, and 5xx. Each request
    /// carries a client-generated id for log correlation only.
    fn post_completions(&self, request: &CompletionsRequest) -> Result<CompletionsResponse> {
        let url = format!("{}/v1/completions", self.cfg.base_url);
        let request_id = REQUEST_COUNTER.fetch_add(1, Ordering::Relaxed);
        let mut last_err = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(backoff_delay(attempt - 1));
            }
            let mut builder = self.http.post(&url).json(request);
            if let Some(key) = &self.cfg.api_key {
                builder = builder.bearer_auth(key);
            }
            match builder.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        return resp.json::<CompletionsResponse>().map_err(|e| {
                            Error::MalformedResponse(format!("invalid completions body: {e}"))
                        });
                    }
                    let body = resp.text().unwrap_or_default();
                    let message = parse_error_message(&body).unwrap_or(body);
                    if status.as_u16() == 404 {
                        return Err(Error::ModelNotFound(message));
                    }
                    if status.is_client_error() && status.as_u16() != 429 {
                        return Err(Error::Endpoint(format!("{status}: {message}")));
                    }
                    last_err = format!("{status}: {message}");
                }
                Err(e) => last_err = e.to_string(),
            }
            debug!(request_id, attempt, error = %last_err, "completions attempt failed");
        }
        Err(Error::Endpoint(format!(
            "request {request_id} to {url} failed after {} attempts: {last_err}",
            self.cfg.max_retries + 1
        )))
    }
}

fn backoff_delay(retry_index: u32) -> Duration {
    let exp = BACKOFF_BASE
        .saturating_mul(2u32.saturating_pow(retry_index))
        .min(BACKOFF_CAP);
    exp.mul_f64(rand::rng().random_range(0.5..1.5))
}

fn parse_error_message(body: &str) -> Option<String> {
    serde_json::from_str::<ErrorResponse>(body)
        .ok()
        .map(|e| e.error.message)
}

impl ModelClient for HttpClient {
    fn model_id(&self) -> &str {
        &self.cfg.model_id
    }

    fn generate(&self, prompt: &str, options: &GenerateOptions) -> Result<GenerateResult> {
        if options.max_tokens == 0 {
            return Err(Error::BadRequest("max_tokens must be >= 1".into()));
        }
        let request = CompletionsRequest {
            model: self.cfg.model_id.clone(),
            prompt: prompt.to_string(),
            max_tokens: options.max_tokens,
            temperature: options.sampling.temperature,
            top_p: options.sampling.top_p,
            top_k: Some(options.sampling.top_k),
            stop: options.stop_surfaces.clone(),
            logprobs: Some(self.cfg.logprobs_top_k),
            echo: false,
        };
        let response = self.post_completions(&request)?;
        normalize_generate_response(&response)
    }

    fn rescore(&self, text: &str) -> Result<Vec<TokenRecord>> {
        if text.is_empty() {
            return Err(Error::BadRequest("cannot rescore empty text".into()));
        }
        let request = CompletionsRequest {
            model: self.cfg.model_id.clone(),
            prompt: text.to_string(),
            max_tokens: 0,
            temperature: 0.0,
            top_p: 1.0,
            top_k: None,
            stop: Vec::new(),
            logprobs: Some(self.cfg.logprobs_top_k),
            echo: true,
        };
        let response = self.post_completions(&request)?;
        normalize_rescore_response(&response)
    }

    fn health_check(&self) -> Result<ModelMetadata> {
        let url = format!("{}/v1/models", self.cfg.base_url);
        let mut last_err = String::new();
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                std::thread::sleep(backoff_delay(attempt - 1));
            }
            let mut builder = self.http.get(&url);
            if let Some(key) = &self.cfg.api_key {
                builder = builder.bearer_auth(key);
            }
            match builder.send() {
                Ok(resp) if resp.status().is_success() => {
                    let listing: ModelsResponse = resp.json().map_err(|e| {
                        Error::MalformedResponse(format!("invalid models listing: {e}"))
                    })?;
                    let available: Vec<String> =
                        listing.data.iter().map(|m| m.id.clone()).collect();
                    if !available.iter().any(|id| id == &self.cfg.model_id) {
                        return Err(Error::ModelNotFound(format!(
                            "{} not in {available:?}",
                            self.cfg.model_id
                        )));
                    }
                    return Ok(ModelMetadata {
                        model_id: self.cfg.model_id.clone(),
                        available_models: available,
                    });
                }
                Ok(resp) => last_err = format!("{}", resp.status()),
                Err(e) => last_err = e.to_string(),
            }
        }
        Err(Error::Endpoint(format!(
            "models listing at {url} failed after {} attempts: {last_err}",
            self.cfg.max_retries + 1
        )))
    }
}

/// Decode a generation response into validated token records, mapping
/// the finish reason and re-appending a stripped stop surface as a
/// synthetic record so context is identical regardless of endpoint
/// stop-inclusion behavior.
pub fn normalize_generate_response(response: &CompletionsResponse) -> Result<GenerateResult> {
    let choice = response
        .choices
        .first()
        .ok_or_else(|| Error::MalformedResponse("no choices in response".into()))?;
    let logprobs = choice
        .logprobs
        .as_ref()
        .ok_or_else(|| Error::MalformedResponse("missing logprobs in response".into()))?;

    let mut tokens = Vec::with_capacity(logprobs.tokens.len());
    for (i, surface) in logprobs.tokens.iter().enumerate() {
        let top = logprobs.top_logprobs.get(i).and_then(|m| m.as_ref());
        let Some(map) = top else {
            return Err(Error::MalformedResponse(format!(
                "missing top logprobs at generated position {i}"
            )));
        };
        let top_probs = top_probs_from_logprobs(map);
        if top_probs.len() < 2 {
            return Err(Error::MalformedResponse(format!(
                "only {} top logprobs at position {i}; need >= 2",
                top_probs.len()
            )));
        }
        tokens.push(TokenRecord::new(surface.clone(), top_probs, i));
    }

    let stop_reason = match (choice.finish_reason.as_str(), &choice.stop_reason) {
        ("length", _) => StopReason::MaxTokens,
        ("stop", Some(surface)) => StopReason::StopSurface(surface.clone()),
        ("stop", None) => StopReason::EndOfSequence,
        (other, _) => {
            return Err(Error::MalformedResponse(format!(
                "unknown finish_reason {other:?}"
            )))
        }
    };

    if let StopReason::StopSurface(surface) = &stop_reason {
        let text: String = tokens.iter().map(|t| t.text.as_str()).collect();
        if !text.ends_with(surface.as_str()) {
            tokens.push(TokenRecord::synthetic(surface.clone(), tokens.len()));
        }
    }

    Ok(GenerateResult {
        tokens,
        stop_reason,
        usage: Usage {
            prompt_tokens: response.usage.prompt_tokens,
            completion_tokens: response.usage.completion_tokens,
        },
    })
}

/// Decode an echo response into one record per scored position. A null
/// distribution is only legal at position 0, where it becomes a synthetic
/// record that margin statistics will skip.
pub fn normalize_rescore_response(response: &CompletionsResponse) -> Result<Vec<TokenRecord>> {
    let choice = response
        .choices
        .first()
        .ok_or_else(|| Error::MalformedResponse("no choices in response".into()))?;
    let logprobs = choice.logprobs.as_ref().filter(|lp| !lp.tokens.is_empty());
    let Some(logprobs) = logprobs else {
        return Err(Error::UnsupportedCapability(
            "endpoint did not return prompt logprobs for echo request".into(),
        ));
    };

    let mut records = Vec::with_capacity(logprobs.tokens.len());
    for (i, surface) in logprobs.tokens.iter().enumerate() {
        match logprobs.top_logprobs.get(i).and_then(|m| m.as_ref()) {
            Some(map) => {
                let top_probs = top_probs_from_logprobs(map);
                if top_probs.len() < 2 {
                    return Err(Error::MalformedResponse(format!(
                        "only {} top logprobs at scored position {i}; need >= 2",
                        top_probs.len()
                    )));
                }
                records.push(TokenRecord::new(surface.clone(), top_probs, i));
            }
            None if i == 0 => records.push(TokenRecord::synthetic(surface.clone(), 0)),
            None => {
                return Err(Error::MalformedResponse(format!(
                    "missing top logprobs at scored position {i}"
                )));
            }
        }
    }
    if records.len() > 1 && records.iter().all(|r| r.synthetic) {
        warn!("rescore returned only synthetic records; margins will be empty");
    }
    Ok(records)
}

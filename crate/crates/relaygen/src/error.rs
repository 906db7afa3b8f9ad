//! Crate-wide error type.
//!
//! Every fallible operation in this crate returns [`Error`]. Variants map
//! one-to-one onto the failure modes of the public API: malformed token
//! records, misaligned trace/series pairs, protocol violations in the
//! switching state machine, endpoint failures, and so on.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A token record failed validation (missing runner-up probability,
    /// unsorted or out-of-range entries).
    #[error("malformed token record at position {position}: {reason}")]
    MalformedRecord { position: usize, reason: String },

    /// A statistic was requested over too few token positions.
    #[error("insufficient data: need at least {needed} values, got {got}")]
    InsufficientData { needed: usize, got: usize },

    /// Invalid smoothing window for a margin trajectory.
    #[error("bad window {window} for series of length {len}")]
    BadWindow { window: usize, len: usize },

    /// Invalid cue surface (empty or not lowercase canonical form).
    #[error("bad cue: {0}")]
    BadCue(String),

    /// Position outside the trace.
    #[error("position {position} out of range for trace of length {len}")]
    BadPosition { position: usize, len: usize },

    /// A trace and its margin series (or two parallel lists) disagree in length.
    #[error("misaligned inputs: {left} vs {right} ({context})")]
    MisalignedInputs {
        left: usize,
        right: usize,
        context: String,
    },

    /// Invalid request parameters (empty prompt, zero budget, empty rescore text).
    #[error("bad request: {0}")]
    BadRequest(String),

    /// A turn was requested on a session already in the Done phase.
    #[error("session closed")]
    SessionClosed,

    /// A completed turn violated the switching protocol (wrong model,
    /// stop surface outside the configured stop set).
    #[error("protocol violation: {0}")]
    ProtocolViolation(String),

    /// A session aborted mid-run after endpoint retries were exhausted;
    /// the partial transcript is preserved by the caller.
    #[error("session aborted: {0}")]
    AbortedSession(String),

    /// Endpoint unreachable or persistently failing after retries.
    #[error("endpoint error: {0}")]
    Endpoint(String),

    /// The endpoint answered but the payload is not usable (missing
    /// logprobs, malformed JSON shape).
    #[error("malformed response: {0}")]
    MalformedResponse(String),

    /// The endpoint does not support a required facility (e.g. echo
    /// rescoring with prompt logprobs).
    #[error("unsupported capability: {0}")]
    UnsupportedCapability(String),

    /// The configured model id is not served by the endpoint.
    #[error("model not found: {0}")]
    ModelNotFound(String),

    /// A mock request fell outside every scripted path.
    #[error("script miss: {0}")]
    ScriptMiss(String),

    /// Latency cost model with nonpositive decode costs or negative overheads.
    #[error("bad cost model: {0}")]
    BadCostModel(String),

    /// Metrics requested over an empty transcript.
    #[error("empty transcript")]
    EmptyTranscript,

    /// Aggregation requested over an empty collection.
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
}

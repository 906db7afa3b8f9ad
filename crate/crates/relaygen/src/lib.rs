//! Segment-level runtime model switching between a large and a small
//! language model served behind OpenAI-compatible endpoints.
//!
//! Long-form reasoning output is not uniformly hard to generate: stretches
//! that follow certain discourse cues, and the whole post-reasoning answer
//! stage, are easy enough for a much smaller model to continue. This crate
//! implements the full pipeline that exploits that:
//!
//! - [`margin`] — token-level probability margins (top-1 minus top-2) and
//!   pooled statistics, the uncertainty signal everything else is built on.
//! - [`cues`] — the canonical discourse-cue pool, surface variants,
//!   occurrence matching and sentence-boundary detection.
//! - [`calibration`] — the offline procedure that selects, per model pair,
//!   the cues whose post-sentence margin clears the global mean by at
//!   least one standard error.
//! - [`switcher`] — the runtime state machine that alternates generation
//!   between the two endpoints using stop sequences, sentence-bounded
//!   offloading, and answer-stage delegation.
//! - [`client`] — OpenAI-compatible completions client with logprobs,
//!   stop sequences, echo rescoring, and retries.
//! - [`mocksim`] — deterministic scripted backend (in-process and as a
//!   wire-compatible HTTP server) plus an analytical latency simulator,
//!   enabling GPU-free end-to-end testing.
//! - [`metrics`] — utilization, switch, prefill, and answer-consistency
//!   accounting over session transcripts.
//! - [`evalharness`] — benchmark runner with answer extraction, pass@1,
//!   and the answer-stage delegation consistency experiment.

pub mod calibration;
pub mod client;
pub mod cues;
pub mod error;
pub mod evalharness;
pub mod fixtures;
pub mod margin;
pub mod metrics;
pub mod mocksim;
pub mod switcher;
pub mod trace;
pub mod util;

pub use error::{Error, Result};
pub use trace::{Producer, TokenRecord, Trace};

//! Token traces: the atom of every analysis in this crate.
//!
//! A [`TokenRecord`] is one generated token together with the top-k
//! probabilities the serving endpoint reported for that position. A
//! [`Trace`] is an ordered sequence of records. Traces are exchanged on
//! disk as JSONL, one token per line:
//!
//! ```text
//! {"text": " the", "top": [[" the", 0.71], [" a", 0.12]], "pos": 5}
//! ```
//!
//! Ingestion tolerates extra fields so traces recorded by other tools
//! can be fed in unchanged.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which model produced a token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Producer {
    Large,
    Small,
}

impl std::fmt::Display for Producer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Producer::Large => write!(f, "large"),
            Producer::Small => write!(f, "small"),
        }
    }
}

/// One generated token with its surface text and top-k probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    /// Decoded token surface.
    pub text: String,
    /// `(surface, probability)` pairs, sorted non-increasing by probability.
    #[serde(rename = "top")]
    pub top_probs: Vec<(String, f64)>,
    /// 0-based index in the trace.
    #[serde(rename = "pos")]
    pub position: usize,
    /// True for records fabricated by the client to re-append a stop
    /// surface the endpoint stripped. Synthetic records carry a fake
    /// one-hot distribution and are excluded from margin statistics.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub synthetic: bool,
}

impl TokenRecord {
    pub fn new(text: impl Into<String>, top_probs: Vec<(String, f64)>, position: usize) -> Self {
        Self {
            text: text.into(),
            top_probs,
            position,
            synthetic: false,
        }
    }

    /// A stand-in record for a stop surface the endpoint did not return
    /// as tokens. The one-hot distribution keeps the record structurally
    /// valid while the `synthetic` flag keeps it out of margin statistics.
    pub fn synthetic(text: impl Into<String>, position: usize) -> Self {
        let text = text.into();
        Self {
            top_probs: vec![(text.clone(), 1.0), (String::new(), 0.0)],
            text,
            position,
            synthetic: true,
        }
    }
}

/// An ordered token sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub tokens: Vec<TokenRecord>,
}

impl Trace {
    pub fn new(tokens: Vec<TokenRecord>) -> Self {
        Self { tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Concatenated surface text of the whole trace.
    pub fn text(&self) -> String {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Byte offset of each token's start in [`Trace::text`], plus a final
    /// entry equal to the total text length.
    pub fn token_byte_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.tokens.len() + 1);
        let mut acc = 0;
        for t in &self.tokens {
            offsets.push(acc);
            acc += t.text.len();
        }
        offsets.push(acc);
        offsets
    }

    /// Read a trace from JSONL, one token per line. Blank lines are
    /// skipped; extra fields are ignored; positions are re-derived from
    /// line order so partially edited files stay consistent.
    pub fn from_jsonl(reader: impl Read) -> Result<Self> {
        let mut tokens = Vec::new();
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let mut rec: TokenRecord =
                serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                    position: lineno,
                    reason: format!("invalid JSONL: {e}"),
                })?;
            rec.position = tokens.len();
            tokens.push(rec);
        }
        Ok(Self { tokens })
    }

    pub fn from_jsonl_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_jsonl(file)
    }

    pub fn to_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for token in &self.tokens {
            serde_json::to_writer(&mut writer, token)?;
            writer.write_all(b"\n")?;
        }
        Ok(())
    }
}

impl std::ops::Index<usize> for Trace {
    type Output = TokenRecord;

    fn index(&self, i: usize) -> &TokenRecord {
        &self.tokens[i]
    }
}

//! Discourse-level cue pool, surface-variant expansion, occurrence
//! matching, and sentence-boundary detection.
//!
//! The canonical pool is a fixed, closed set of lexical markers that
//! signal structural transitions in a reasoning trace (progression,
//! reconsideration, inference, consolidation, reference,
//! acknowledgement). Matching operates on detokenized text rather than
//! token ids, which keeps the cue set tokenizer-agnostic: surface forms
//! like `"So "` cross token boundaries in some tokenizers.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::Trace;

/// Discourse function of a cue. Descriptive only; category membership
/// does not make a cue a good switch signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CueCategory {
    Progression,
    Reconsideration,
    Inference,
    Consolidation,
    Reference,
    Acknowledgement,
}

/// One canonical cue with its expanded surface variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueEntry {
    pub canonical: String,
    pub category: CueCategory,
    pub variants: BTreeSet<String>,
}

/// The closed pool of candidate cues considered during calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CuePool {
    pub entries: Vec<CueEntry>,
}

/// One cue hit inside a trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CueOccurrence {
    pub cue_canonical: String,
    pub token_position: usize,
    pub matched_surface: String,
}

/// The canonical cue pool, by category. `therefore` is listed under both
/// inference and consolidation; the pool stores one entry per canonical
/// with the first-listed category.
const DEFAULT_POOL: &[(CueCategory, &[&str])] = &[
    (CueCategory::Progression, &["now", "then", "next", "again"]),
    (
        CueCategory::Reconsideration,
        &["wait", "however", "alternatively", "but", "maybe", "hmm", "oh"],
    ),
    (
        CueCategory::Inference,
        &["thus", "hence", "therefore", "similarly", "specifically"],
    ),
    (
        CueCategory::Consolidation,
        &["so", "therefore", "check", "double-check", "verify"],
    ),
    (CueCategory::Reference, &["another", "other", "any"]),
    (CueCategory::Acknowledgement, &["ah"]),
];

/// Expand a canonical cue into its surface variants: the bare word, its
/// capitalized form, and both with a trailing comma or space.
pub fn expand_variants(canonical: &str) -> Result<BTreeSet<String>> {
    if canonical.is_empty() {
        return Err(Error::BadCue("empty canonical form".into()));
    }
    if canonical.trim() != canonical || canonical.chars().any(|c| c.is_uppercase()) {
        return Err(Error::BadCue(format!(
            "canonical form must be trimmed lowercase, got {canonical:?}"
        )));
    }
    let capitalized = capitalize(canonical);
    let mut variants = BTreeSet::new();
    for base in [canonical, capitalized.as_str()] {
        variants.insert(base.to_string());
        variants.insert(format!("{base},"));
        variants.insert(format!("{base} "));
    }
    Ok(variants)
}

fn capitalize(word: &str) -> String {
    let mut chars = word.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

impl CueEntry {
    pub fn new(canonical: &str, category: CueCategory) -> Result<Self> {
        Ok(Self {
            canonical: canonical.to_string(),
            category,
            variants: expand_variants(canonical)?,
        })
    }

    pub fn with_extra_variants<I, S>(mut self, extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.variants.extend(extra.into_iter().map(Into::into));
        self
    }
}

impl CuePool {
    /// Build a pool from entries, rejecting duplicate canonicals.
    pub fn new(entries: Vec<CueEntry>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for entry in &entries {
            if !seen.insert(entry.canonical.as_str()) {
                return Err(Error::BadCue(format!(
                    "duplicate canonical {:?} in pool",
                    entry.canonical
                )));
            }
        }
        Ok(Self { entries })
    }

    pub fn entry(&self, canonical: &str) -> Option<&CueEntry> {
        self.entries.iter().find(|e| e.canonical == canonical)
    }

    pub fn canonicals(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.canonical.as_str())
    }

    /// Union of all variants across the pool, e.g. for the
    /// all-candidates ablation that skips selection.
    pub fn all_surfaces(&self) -> BTreeSet<String> {
        self.entries
            .iter()
            .flat_map(|e| e.variants.iter().cloned())
            .collect()
    }

    /// Load a pool override from TOML `[[cue]]` tables.
    pub fn from_toml_str(input: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct PoolFile {
            #[serde(default, rename = "cue")]
            cues: Vec<CueFileEntry>,
        }
        #[derive(Deserialize)]
        struct CueFileEntry {
            canonical: String,
            category: CueCategory,
            #[serde(default)]
            extra_variants: Vec<String>,
        }
        let file: PoolFile = toml::from_str(input)?;
        let entries = file
            .cues
            .into_iter()
            .map(|c| {
                Ok(CueEntry::new(&c.canonical, c.category)?.with_extra_variants(c.extra_variants))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(entries)
    }

    pub fn from_toml_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// The canonical pool with variants expanded. Duplicated canonicals
/// collapse to their first-listed category.
pub fn default_pool() -> CuePool {
    let mut entries: Vec<CueEntry> = Vec::new();
    for (category, canonicals) in DEFAULT_POOL {
        for canonical in *canonicals {
            if entries.iter().any(|e| e.canonical == *canonical) {
                continue;
            }
            entries.push(CueEntry::new(canonical, *category).expect("default pool is valid"));
        }
    }
    CuePool { entries }
}

/// Locate cue occurrences in a trace.
///
/// Matches run over the detokenized text with word-boundary semantics
/// (alphanumeric adjacency blocks a match on either side), then map back
/// to the token whose span contains the match start. Overlapping matches
/// resolve longest-surface-first; the scan resumes past each match.
pub fn find_occurrences(trace: &Trace, pool: &CuePool) -> Vec<CueOccurrence> {
    let text = trace.text();
    let offsets = trace.token_byte_offsets();

    // (variant, canonical), longest variant first so e.g. "Thus," beats
    // "Thus" at the same start; remaining ties break lexicographically.
    let mut variants: Vec<(&str, &str)> = pool
        .entries
        .iter()
        .flat_map(|e| e.variants.iter().map(move |v| (v.as_str(), e.canonical.as_str())))
        .filter(|(v, _)| !v.is_empty())
        .collect();
    variants.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(b.0)).then(a.1.cmp(b.1)));

    let mut occurrences = Vec::new();
    let bytes = text.as_bytes();
    let mut pos = 0;
    while pos < bytes.len() {
        if !text.is_char_boundary(pos) {
            pos += 1;
            continue;
        }
        let boundary_before = text[..pos]
            .chars()
            .next_back()
            .is_none_or(|c| !c.is_alphanumeric());
        let matched = boundary_before
            .then(|| {
                variants.iter().find(|(variant, _)| {
                    text[pos..].starts_with(variant) && boundary_after(&text, pos, variant)
                })
            })
            .flatten();
        match matched {
            Some(&(variant, canonical)) => {
                occurrences.push(CueOccurrence {
                    cue_canonical: canonical.to_string(),
                    token_position: token_at_offset(&offsets, pos),
                    matched_surface: variant.to_string(),
                });
                pos += variant.len();
            }
            None => {
                pos += text[pos..].chars().next().map_or(1, char::len_utf8);
            }
        }
    }
    occurrences
}

/// A variant ending in an alphanumeric char (bare word form) needs a
/// non-alphanumeric char or end-of-text after it; variants ending in
/// punctuation or space carry their own boundary.
fn boundary_after(text: &str, start: usize, variant: &str) -> bool {
    if variant.chars().next_back().is_some_and(|c| !c.is_alphanumeric()) {
        return true;
    }
    text[start + variant.len()..]
        .chars()
        .next()
        .is_none_or(|c| !c.is_alphanumeric())
}

/// Token index whose byte span contains `offset`.
fn token_at_offset(offsets: &[usize], offset: usize) -> usize {
    match offsets.binary_search(&offset) {
        Ok(exact) => exact.min(offsets.len().saturating_sub(2)),
        Err(insertion) => insertion - 1,
    }
}

/// Smallest position at or after `from_position` whose text contains a
/// sentence terminator, or the trace length if none exists. A `'.'`
/// flanked by digits on both sides is a decimal point, not a terminator,
/// so math traces like "2.4 hours" do not fragment.
pub fn next_sentence_end(trace: &Trace, from_position: usize) -> Result<usize> {
    if from_position >= trace.len() {
        return Err(Error::BadPosition {
            position: from_position,
            len: trace.len(),
        });
    }
    let text = trace.text();
    let offsets = trace.token_byte_offsets();
    for position in from_position..trace.len() {
        let span = &text[offsets[position]..offsets[position + 1]];
        for (i, c) in span.char_indices() {
            let terminator = match c {
                '!' | '?' | '\n' => true,
                '.' => {
                    let global = offsets[position] + i;
                    let prev_digit = text[..global]
                        .chars()
                        .next_back()
                        .is_some_and(|p| p.is_ascii_digit());
                    let next_digit = text[global + 1..]
                        .chars()
                        .next()
                        .is_some_and(|n| n.is_ascii_digit());
                    !(prev_digit && next_digit)
                }
                _ => false,
            };
            if terminator {
                return Ok(position);
            }
        }
    }
    Ok(trace.len())
}

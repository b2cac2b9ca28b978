//! In-memory document analysis.
//!
//! [`TechniqueExtractor`] is the default [`Analyzer`]: it reports every
//! non-overlapping match of `T[0-9]{4}(\.[0-9]{3})?` (MITRE ATT&CK technique
//! ids) scanned left to right over the raw bytes, with a short evidence
//! snippet, plus whole-document statistics. Its output type is the
//! declassification point: an [`AnalysisResult`] is ordinary untainted data
//! whose longest run of copied input is [`SNIPPET_MAX`] bytes.

use std::collections::BTreeSet;

use regex::bytes::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::PlaintextBuffer;
use crate::par::{self, Mode};
use crate::time::Timestamp;

pub const SNIPPET_MAX: usize = 80;
pub const TECHNIQUE_PATTERN: &str = r"T[0-9]{4}(?:\.[0-9]{3})?";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub technique_id: String,
    pub evidence_offset: usize,
    pub evidence_snippet: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stats {
    pub byte_count: usize,
    pub line_count: usize,
    pub distinct_techniques: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisResult {
    pub document_id: String,
    pub findings: Vec<Finding>,
    pub stats: Stats,
    pub produced_at: Timestamp,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AnalyzerError {
    #[error("input buffer has been wiped")]
    BufferWiped,
    #[error("analysis failed: {0}")]
    Failed(String),
}

/// Consumes plaintext by reference and returns only derived results. An
/// implementation must not keep the input or any copy of it.
pub trait Analyzer: Send + Sync {
    fn analyze(
        &self,
        input: &PlaintextBuffer,
        document_id: &str,
        produced_at: Timestamp,
    ) -> Result<AnalysisResult, AnalyzerError>;
}

#[derive(Clone, Debug)]
pub struct TechniqueExtractor {
    pattern: Regex,
}

impl Default for TechniqueExtractor {
    fn default() -> Self {
        Self {
            pattern: Regex::new(TECHNIQUE_PATTERN).expect("technique pattern compiles"),
        }
    }
}

fn is_continuation(b: u8) -> bool {
    b & 0b1100_0000 == 0b1000_0000
}

/// At most `SNIPPET_MAX` bytes around `[start, end)`, trimmed so it does not
/// split a UTF-8 sequence at either edge.
fn snippet(bytes: &[u8], start: usize, end: usize) -> String {
    let budget = SNIPPET_MAX.saturating_sub(end - start);
    let mut lo = start.saturating_sub(budget / 2);
    let mut hi = (end + (budget - (start - lo))).min(bytes.len());
    lo = lo.min(start).max(start.saturating_sub(budget - (hi - end)));
    while lo < start && is_continuation(bytes[lo]) {
        lo += 1;
    }
    while hi > end && hi < bytes.len() && is_continuation(bytes[hi]) {
        hi -= 1;
    }
    debug_assert!(hi - lo <= SNIPPET_MAX);
    String::from_utf8_lossy(&bytes[lo..hi]).into_owned()
}

fn line_count(bytes: &[u8]) -> usize {
    let newlines = bytes.iter().filter(|b| **b == b'\n').count();
    match bytes.last() {
        None => 0,
        Some(b'\n') => newlines,
        Some(_) => newlines + 1,
    }
}

impl Analyzer for TechniqueExtractor {
    fn analyze(
        &self,
        input: &PlaintextBuffer,
        document_id: &str,
        produced_at: Timestamp,
    ) -> Result<AnalysisResult, AnalyzerError> {
        let bytes = input.expose().map_err(|_| AnalyzerError::BufferWiped)?;
        let findings: Vec<Finding> = self
            .pattern
            .find_iter(bytes)
            .map(|m| Finding {
                // The pattern is pure ASCII, so the match is valid UTF-8.
                technique_id: String::from_utf8_lossy(m.as_bytes()).into_owned(),
                evidence_offset: m.start(),
                evidence_snippet: snippet(bytes, m.start(), m.end()),
            })
            .collect();
        let distinct: BTreeSet<&str> = findings.iter().map(|f| f.technique_id.as_str()).collect();
        Ok(AnalysisResult {
            document_id: document_id.to_owned(),
            stats: Stats {
                byte_count: bytes.len(),
                line_count: line_count(bytes),
                distinct_techniques: distinct.len(),
            },
            findings,
            produced_at,
        })
    }
}

/// Analyzes many documents, in input order.
pub fn analyze_batch(
    analyzer: &dyn Analyzer,
    inputs: &[(&PlaintextBuffer, &str)],
    produced_at: Timestamp,
    mode: Mode,
) -> Vec<Result<AnalysisResult, AnalyzerError>> {
    par::map(mode, inputs, |(buf, id)| analyzer.analyze(buf, id, produced_at))
}

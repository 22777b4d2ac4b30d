//! JSON Lines trace files: one `TraceEvent` object per line, in emission order.

use std::fs;
use std::path::Path;

use parp_core::simnet::TraceEvent;

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed trace at line {line}: {message}")]
    Malformed { line: usize, message: String },
}

pub fn to_jsonl(events: &[TraceEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("trace events serialize"));
        out.push('\n');
    }
    out
}

/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn parse_jsonl(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| TraceError::Malformed { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn read(path: &Path) -> Result<Vec<TraceEvent>, TraceError> {
    let text = fs::read_to_string(path).map_err(|source| TraceError::Io { path: path.display().to_string(), source })?;
    parse_jsonl(&text)
}

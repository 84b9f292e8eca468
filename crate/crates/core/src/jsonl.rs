//! JSON-lines reading and writing.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {reason}")]
    Line { line: usize, reason: String },
}

/// Parse one record per non-blank line. Line numbers are 1-based.
pub fn parse<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, JsonlError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(line)
            .map_err(|e| JsonlError::Line { line: i + 1, reason: e.to_string() })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| JsonlError::Io { path: path.display().to_string(), source })?;
    parse(&text)
}

pub fn to_string<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write<T: Serialize>(path: &Path, records: &[T]) -> Result<(), JsonlError> {
    std::fs::write(path, to_string(records))
        .map_err(|source| JsonlError::Io { path: path.display().to_string(), source })
}

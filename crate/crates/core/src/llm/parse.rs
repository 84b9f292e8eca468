//! Extraction of JSON payloads from chat replies.
//!
//! Repair is limited to stripping markdown code fences and locating the first
//! balanced JSON value of the expected kind; nothing else is guessed.

use serde_json::Value;
use thiserror::Error;

use super::{QuestionType, Summary};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("no JSON array found in response")]
    NoArray,
    #[error("no JSON object found in response")]
    NoObject,
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("invalid summary: {0}")]
    Summary(String),
}

/// A validated element of a QnA reply, before ids and provenance are attached.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QnaCandidate {
    pub question: String,
    pub answer: String,
    pub question_type: QuestionType,
    pub source_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedQna {
    pub candidates: Vec<QnaCandidate>,
    /// Elements dropped for missing fields or unknown question types.
    pub dropped: usize,
}

/// Remove a surrounding markdown code fence (```json ... ```), if any.
pub fn strip_code_fences(raw: &str) -> &str {
    let trimmed = raw.trim();
    let Some(rest) = trimmed.strip_prefix("```") else {
        return trimmed;
    };
    // Skip the info string on the opening fence line.
    let body = match rest.find('\n') {
        Some(i) => &rest[i + 1..],
        None => rest,
    };
    body.trim_end().strip_suffix("```").unwrap_or(body).trim()
}

/// Byte span of the first balanced `open`...`close` region, honoring JSON
/// string literals and escapes.
fn balanced_span(text: &str, open: u8, close: u8) -> Option<&str> {
    let bytes = text.as_bytes();
    let start = bytes.iter().position(|&b| b == open)?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            match b {
                _ if escaped => escaped = false,
                b'\\' => escaped = true,
                b'"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            _ if b == open => depth += 1,
            _ if b == close => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..=i]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parse a QnA reply into validated candidates.
pub fn parse_qna_response(raw: &str) -> Result<ParsedQna, ParseError> {
    let body = strip_code_fences(raw);
    let span = balanced_span(body, b'[', b']').ok_or(ParseError::NoArray)?;
    let value: Value = serde_json::from_str(span).map_err(|e| ParseError::Json(e.to_string()))?;
    let items = value.as_array().ok_or(ParseError::NoArray)?;

    let mut parsed = ParsedQna::default();
    for item in items {
        match candidate(item) {
            Some(c) => parsed.candidates.push(c),
            None => parsed.dropped += 1,
        }
    }
    Ok(parsed)
}

fn non_empty_str(item: &Value, field: &str) -> Option<String> {
    item.get(field)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
}

fn candidate(item: &Value) -> Option<QnaCandidate> {
    let question = non_empty_str(item, "question")?;
    let answer = non_empty_str(item, "answer")?;
    let question_type = QuestionType::normalize(item.get("question_type")?.as_str()?)?;
    let source_ref = non_empty_str(item, "source_ref");
    Some(QnaCandidate { question, answer, question_type, source_ref })
}

/// Parse a summarization reply. `chunk_id` is attached by the caller.
pub fn parse_summary_response(raw: &str, chunk_id: &str) -> Result<Summary, ParseError> {
    let body = strip_code_fences(raw);
    let span = balanced_span(body, b'{', b'}').ok_or(ParseError::NoObject)?;
    let value: Value = serde_json::from_str(span).map_err(|e| ParseError::Json(e.to_string()))?;
    let concepts = value
        .get("key_concepts")
        .and_then(Value::as_array)
        .ok_or_else(|| ParseError::Summary("key_concepts must be an array".into()))?;
    let key_concepts: Vec<String> = concepts
        .iter()
        .filter_map(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect();
    if key_concepts.is_empty() {
        return Err(ParseError::Summary("key_concepts is empty".into()));
    }
    let summary_text = value
        .get("summary_text")
        .and_then(Value::as_str)
        .map(str::trim)
        .unwrap_or_default()
        .to_string();
    Ok(Summary { chunk_id: chunk_id.to_string(), key_concepts, summary_text })
}

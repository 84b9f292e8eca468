//! Chunk summarization and QnA generation over a pluggable chat backend.
//!
//! Every backend reply passes JSON validation before any of its text enters a
//! [`Summary`] or [`QnaPair`]. A reply that cannot be parsed is retried once
//! with a repair instruction appended to the prompt.

mod backend;
mod parse;

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

pub use backend::{backend_from_config, ChatBackend, FixtureRule, FixtureTable, MockChat, RemoteChat};
pub use parse::{parse_qna_response, parse_summary_response, strip_code_fences, ParseError, ParsedQna, QnaCandidate};

use crate::http::HttpError;
use crate::ingest::Chunk;

const SUMMARIZE_TEMPLATE: &str = include_str!("../../assets/prompts/summarize.v1.txt");
const QNA_TEMPLATE: &str = include_str!("../../assets/prompts/qna.v1.txt");
const REPAIR_SUFFIX: &str = include_str!("../../assets/prompts/repair.v1.txt");

pub const PROMPT_VERSION: &str = "v1";
pub const DEFAULT_N_PAIRS: usize = 5;
pub const DEFAULT_CORPUS_CONTEXT: &str =
    "a technical textbook on CANDU nuclear power plant technology written for engineering students and station staff";

#[derive(Debug, Error)]
pub enum GenError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid generation config: {0}")]
    Config(String),
    #[error("generation backend: {0}")]
    Backend(#[from] HttpError),
    #[error("malformed backend response: {0}")]
    Response(String),
    #[error("could not parse summary for chunk {chunk_id}: {reason}")]
    SummaryParse { chunk_id: String, reason: String, raw: String },
    #[error("no valid QnA pairs for chunk {chunk_id}: {reason}")]
    QnaGeneration { chunk_id: String, reason: String, raw: String },
}

impl GenError {
    /// True for failures of the backend itself rather than of its output.
    pub fn is_backend(&self) -> bool {
        matches!(self, GenError::Backend(_) | GenError::Response(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenBackendKind {
    Remote,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenBackendConfig {
    pub kind: GenBackendKind,
    /// Full URL of the chat-completions endpoint (remote only).
    pub endpoint_url: String,
    pub model_name: String,
    pub api_key_env: String,
    pub max_retries: u32,
    pub timeout_seconds: f64,
    pub temperature: f64,
    /// Mock only.
    pub seed: u64,
    /// Mock only; the bundled table is used when unset.
    pub fixtures_path: Option<PathBuf>,
    pub retry_backoff_ms: u64,
    pub max_in_flight: usize,
    pub n_pairs: usize,
    pub corpus_context: String,
}

impl Default for GenBackendConfig {
    fn default() -> Self {
        Self {
            kind: GenBackendKind::Mock,
            endpoint_url: String::new(),
            model_name: "gpt-4o".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 2,
            timeout_seconds: 60.0,
            temperature: 0.7,
            seed: 0,
            fixtures_path: None,
            retry_backoff_ms: 500,
            max_in_flight: 4,
            n_pairs: DEFAULT_N_PAIRS,
            corpus_context: DEFAULT_CORPUS_CONTEXT.into(),
        }
    }
}

impl GenBackendConfig {
    pub fn mock(seed: u64) -> Self {
        Self { kind: GenBackendKind::Mock, seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        if self.kind == GenBackendKind::Remote
            && (self.endpoint_url.is_empty() || self.api_key_env.is_empty())
        {
            return Err(GenError::Config("remote backend requires endpoint_url and api_key_env".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GenError::Config(format!("temperature {} outside [0, 2]", self.temperature)));
        }
        if !(self.timeout_seconds > 0.0) {
            return Err(GenError::Config("timeout_seconds must be positive".into()));
        }
        if self.max_in_flight == 0 || self.n_pairs == 0 {
            return Err(GenError::Config("max_in_flight and n_pairs must be positive".into()));
        }
        Ok(())
    }
}

/// Send one prompt through the configured backend.
pub fn complete(prompt: &str, cfg: &GenBackendConfig) -> Result<String, GenError> {
    if prompt.trim().is_empty() {
        return Err(GenError::Precondition("prompt is empty".into()));
    }
    backend_from_config(cfg)?.complete(prompt)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Summary {
    pub chunk_id: String,
    pub key_concepts: Vec<String>,
    pub summary_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionType {
    FundamentalRecall,
    TechnicalExplanation,
    MultiStepAnalytical,
}

impl QuestionType {
    pub const ALL: [QuestionType; 3] =
        [Self::FundamentalRecall, Self::TechnicalExplanation, Self::MultiStepAnalytical];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FundamentalRecall => "fundamental_recall",
            Self::TechnicalExplanation => "technical_explanation",
            Self::MultiStepAnalytical => "multi_step_analytical",
        }
    }

    /// Map a free-form label onto a class via lowercase/underscore normalization.
    pub fn normalize(label: &str) -> Option<Self> {
        let norm: String = label
            .trim()
            .to_lowercase()
            .split(|c: char| c.is_whitespace() || c == '-' || c == '_')
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join("_");
        match norm.as_str() {
            "fundamental_recall" => Some(Self::FundamentalRecall),
            "technical_explanation" => Some(Self::TechnicalExplanation),
            "multi_step_analytical" | "open_ended_critical_thinking" | "critical_thinking" => {
                Some(Self::MultiStepAnalytical)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStatus {
    Pending,
    Flagged,
    Accepted,
    Rejected,
    Edited,
}

impl PairStatus {
    pub fn can_transition(self, to: PairStatus) -> bool {
        use PairStatus::*;
        matches!(
            (self, to),
            (Pending, Flagged) | (Pending | Flagged, Accepted | Rejected | Edited)
        )
    }

    pub fn is_decided(self) -> bool {
        matches!(self, PairStatus::Accepted | PairStatus::Rejected | PairStatus::Edited)
    }
}

#[derive(Debug, Error)]
#[error("illegal status transition {from:?} -> {to:?}")]
pub struct TransitionError {
    pub from: PairStatus,
    pub to: PairStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QnaPair {
    pub pair_id: String,
    pub chunk_id: String,
    pub question: String,
    pub answer: String,
    pub question_type: QuestionType,
    pub source_ref: String,
    pub similarity: Option<f64>,
    pub status: PairStatus,
}

impl QnaPair {
    pub fn transition(&mut self, to: PairStatus) -> Result<(), TransitionError> {
        if !self.status.can_transition(to) {
            return Err(TransitionError { from: self.status, to });
        }
        self.status = to;
        Ok(())
    }
}

/// Stable id from the chunk id and question text.
pub fn pair_id(chunk_id: &str, question: &str) -> String {
    let mut h = Sha256::new();
    h.update(chunk_id.as_bytes());
    h.update([0u8]);
    h.update(question.as_bytes());
    format!("qa-{}", &hex::encode(h.finalize())[..16])
}

fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{{{name}}}}}"), value);
    }
    out
}

fn section_label(chunk: &Chunk) -> String {
    if chunk.section_path.is_empty() {
        "(none)".into()
    } else {
        chunk.section_path.join(" > ")
    }
}

pub fn summarize_prompt(chunk: &Chunk, corpus_context: &str) -> String {
    render(
        SUMMARIZE_TEMPLATE,
        &[
            ("corpus_context", corpus_context),
            ("source_ref", &chunk.source_ref()),
            ("section_path", &section_label(chunk)),
            ("chunk_text", &chunk.text),
        ],
    )
}

pub fn qna_prompt(chunk: &Chunk, summary: &Summary, n_pairs: usize, corpus_context: &str) -> String {
    let concepts: String =
        summary.key_concepts.iter().map(|c| format!("- {c}\n")).collect::<String>();
    render(
        QNA_TEMPLATE,
        &[
            ("corpus_context", corpus_context),
            ("source_ref", &chunk.source_ref()),
            ("section_path", &section_label(chunk)),
            ("chunk_text", &chunk.text),
            ("key_concepts", concepts.trim_end()),
            ("n_pairs", &n_pairs.to_string()),
        ],
    )
}

/// Counters for recoverable problems seen during generation.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayWarnings {
    pub dropped_elements: usize,
    pub repair_retries: usize,
}

/// Summarization and QnA generation bound to one backend.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    corpus_context: String,
    max_in_flight: usize,
    dropped: AtomicUsize,
    repairs: AtomicUsize,
}

impl Gateway {
    pub fn new(cfg: &GenBackendConfig) -> Result<Self, GenError> {
        cfg.validate()?;
        Ok(Self::with_backend(backend_from_config(cfg)?, cfg))
    }

    pub fn with_backend(backend: Box<dyn ChatBackend>, cfg: &GenBackendConfig) -> Self {
        Self {
            backend,
            corpus_context: cfg.corpus_context.clone(),
            max_in_flight: cfg.max_in_flight.max(1),
            dropped: AtomicUsize::new(0),
            repairs: AtomicUsize::new(0),
        }
    }

    pub fn backend_id(&self) -> String {
        self.backend.backend_id()
    }

    pub fn warnings(&self) -> GatewayWarnings {
        GatewayWarnings {
            dropped_elements: self.dropped.load(Ordering::SeqCst),
            repair_retries: self.repairs.load(Ordering::SeqCst),
        }
    }

    pub fn summarize_chunk(&self, chunk: &Chunk) -> Result<Summary, GenError> {
        if chunk.text.trim().is_empty() {
            return Err(GenError::Precondition(format!("chunk {} has empty text", chunk.chunk_id)));
        }
        let prompt = summarize_prompt(chunk, &self.corpus_context);
        let raw = self.backend.complete(&prompt)?;
        match parse_summary_response(&raw, &chunk.chunk_id) {
            Ok(s) => Ok(s),
            Err(first) => {
                self.repairs.fetch_add(1, Ordering::SeqCst);
                warn!(chunk = %chunk.chunk_id, error = %first, "summary unparseable; retrying");
                let raw = self.backend.complete(&format!("{prompt}{REPAIR_SUFFIX}"))?;
                parse_summary_response(&raw, &chunk.chunk_id).map_err(|e| GenError::SummaryParse {
                    chunk_id: chunk.chunk_id.clone(),
                    reason: e.to_string(),
                    raw,
                })
            }
        }
    }

    pub fn generate_qna(
        &self,
        chunk: &Chunk,
        summary: &Summary,
        n_pairs: usize,
    ) -> Result<Vec<QnaPair>, GenError> {
        if summary.chunk_id != chunk.chunk_id {
            return Err(GenError::Precondition(format!(
                "summary for {} does not belong to chunk {}",
                summary.chunk_id, chunk.chunk_id
            )));
        }
        if n_pairs == 0 {
            return Err(GenError::Precondition("n_pairs must be positive".into()));
        }
        let prompt = qna_prompt(chunk, summary, n_pairs, &self.corpus_context);
        let raw = self.backend.complete(&prompt)?;
        let pairs = self.pairs_from_reply(chunk, &raw, n_pairs);
        if !pairs.is_empty() {
            return Ok(pairs);
        }
        self.repairs.fetch_add(1, Ordering::SeqCst);
        warn!(chunk = %chunk.chunk_id, "no valid pairs in reply; retrying");
        let raw = self.backend.complete(&format!("{prompt}{REPAIR_SUFFIX}"))?;
        let pairs = self.pairs_from_reply(chunk, &raw, n_pairs);
        if pairs.is_empty() {
            let reason = match parse_qna_response(&raw) {
                Err(e) => e.to_string(),
                Ok(_) => "reply contained no valid elements".into(),
            };
            return Err(GenError::QnaGeneration { chunk_id: chunk.chunk_id.clone(), reason, raw });
        }
        Ok(pairs)
    }

    fn pairs_from_reply(&self, chunk: &Chunk, raw: &str, n_pairs: usize) -> Vec<QnaPair> {
        let parsed = match parse_qna_response(raw) {
            Ok(p) => p,
            Err(_) => return Vec::new(),
        };
        let mut dropped = parsed.dropped;
        let mut out: Vec<QnaPair> = Vec::new();
        for c in parsed.candidates {
            let id = pair_id(&chunk.chunk_id, &c.question);
            if out.len() == n_pairs || out.iter().any(|p| p.pair_id == id) {
                dropped += 1;
                continue;
            }
            out.push(QnaPair {
                pair_id: id,
                chunk_id: chunk.chunk_id.clone(),
                question: c.question,
                answer: c.answer,
                question_type: c.question_type,
                source_ref: c.source_ref.unwrap_or_else(|| chunk.source_ref()),
                similarity: None,
                status: PairStatus::Pending,
            });
        }
        if dropped > 0 {
            warn!(chunk = %chunk.chunk_id, dropped, "dropped invalid QnA elements");
            self.dropped.fetch_add(dropped, Ordering::SeqCst);
        }
        out
    }

    /// Summarize every chunk with at most `max_in_flight` concurrent calls.
    /// Results keep input order.
    pub fn summarize_all(&self, chunks: &[Chunk]) -> Vec<Result<Summary, GenError>> {
        bounded_map(chunks, self.max_in_flight, |c| self.summarize_chunk(c))
    }

    pub fn generate_all(
        &self,
        work: &[(Chunk, Summary)],
        n_pairs: usize,
    ) -> Vec<Result<Vec<QnaPair>, GenError>> {
        bounded_map(work, self.max_in_flight, |(c, s)| self.generate_qna(c, s, n_pairs))
    }
}

/// Map `f` over `items` on up to `workers` threads, preserving order.
fn bounded_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.min(items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock poisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot lock poisoned").expect("every item processed"))
        .collect()
}

/// Summarize one chunk with a backend built from `cfg`.
pub fn summarize_chunk(chunk: &Chunk, cfg: &GenBackendConfig) -> Result<Summary, GenError> {
    if chunk.text.trim().is_empty() {
        return Err(GenError::Precondition(format!("chunk {} has empty text", chunk.chunk_id)));
    }
    Gateway::new(cfg)?.summarize_chunk(chunk)
}

/// Generate up to `n_pairs` pairs for one chunk with a backend built from `cfg`.
pub fn generate_qna(
    chunk: &Chunk,
    summary: &Summary,
    n_pairs: usize,
    cfg: &GenBackendConfig,
) -> Result<Vec<QnaPair>, GenError> {
    Gateway::new(cfg)?.generate_qna(chunk, summary, n_pairs)
}

//! In-memory review state backed by the dataset file and an append-only
//! decision log.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};
use synthqa_core::evaluation::EvaluationReport;
use synthqa_core::ingest::Chunk;
use synthqa_core::llm::QnaPair;
use synthqa_core::review::{
    export_jsonl, latest_decisions, parse_dataset, parse_log, queue_order, review_state, state_counts,
    DecisionRequest, QueueFilter, ReviewDecision, ReviewError, ReviewState, StateCounts,
};
use thiserror::Error;

/// Characters of chunk text shown in queue listings.
pub const EXCERPT_CHARS: usize = 200;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("{path}: {source}")]
    Review { path: String, source: ReviewError },
    #[error("unknown pair_id {0}")]
    UnknownPair(String),
    #[error(transparent)]
    InvalidDecision(ReviewError),
    #[error("dataset file changed on disk since the service started")]
    DatasetChanged,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.display().to_string(), source }
}

fn sha256_file(path: &Path) -> Result<String, StoreError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Serialize)]
pub struct QueueItem {
    pub pair_id: String,
    pub chunk_id: String,
    pub question: String,
    pub answer: String,
    pub question_type: synthqa_core::llm::QuestionType,
    pub source_ref: String,
    pub similarity: Option<f64>,
    pub state: ReviewState,
    pub chunk_excerpt: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct QueuePage {
    pub status: QueueFilter,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<QueueItem>,
}

#[derive(Debug, Clone, Serialize)]
pub struct PairDetail {
    pub pair: QnaPair,
    pub state: ReviewState,
    pub chunk: Option<Chunk>,
    pub decision: Option<ReviewDecision>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Stats {
    pub counts: StateCounts,
    pub total: usize,
    pub decided: usize,
    pub entropy_bits: Option<f64>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct StorePaths {
    pub dataset: PathBuf,
    pub decisions: PathBuf,
    pub chunks: Option<PathBuf>,
    pub report: Option<PathBuf>,
}

pub struct ReviewStore {
    paths: StorePaths,
    dataset_hash: String,
    pairs: Vec<QnaPair>,
    index: HashMap<String, usize>,
    chunks: HashMap<String, Chunk>,
    report: Option<EvaluationReport>,
    log: Vec<ReviewDecision>,
    /// Position in `log` of the winning decision per pair.
    latest: HashMap<String, usize>,
    writer: File,
}

impl ReviewStore {
    /// Load the dataset, optional chunks and report, and replay the decision
    /// log. A log that fails to parse is an error naming the line.
    pub fn open(paths: StorePaths) -> Result<Self, StoreError> {
        let dataset_text = std::fs::read_to_string(&paths.dataset).map_err(io_err(&paths.dataset))?;
        let dataset_hash = hex::encode(Sha256::digest(dataset_text.as_bytes()));
        let pairs = parse_dataset(&dataset_text)
            .map_err(|source| StoreError::Review { path: paths.dataset.display().to_string(), source })?;
        let index = pairs.iter().enumerate().map(|(i, p)| (p.pair_id.clone(), i)).collect();

        let chunks = match &paths.chunks {
            Some(p) => synthqa_core::jsonl::read::<Chunk>(p)
                .map_err(|e| StoreError::Parse { path: p.display().to_string(), reason: e.to_string() })?
                .into_iter()
                .map(|c| (c.chunk_id.clone(), c))
                .collect(),
            None => HashMap::new(),
        };
        let report = match &paths.report {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(io_err(p))?;
                Some(
                    EvaluationReport::from_json(&text)
                        .map_err(|e| StoreError::Parse { path: p.display().to_string(), reason: e.to_string() })?,
                )
            }
            None => None,
        };

        let log = match std::fs::read_to_string(&paths.decisions) {
            Ok(text) => {
                let known: HashSet<&str> = pairs.iter().map(|p| p.pair_id.as_str()).collect();
                parse_log(&text, &known)
                    .map_err(|source| StoreError::Review { path: paths.decisions.display().to_string(), source })?
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(io_err(&paths.decisions)(e)),
        };
        let writer = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&paths.decisions)
            .map_err(io_err(&paths.decisions))?;

        let mut store =
            Self { paths, dataset_hash, pairs, index, chunks, report, log: Vec::new(), latest: HashMap::new(), writer };
        for d in log {
            store.record(d);
        }
        Ok(store)
    }

    fn record(&mut self, d: ReviewDecision) {
        let pos = self.log.len();
        self.latest.insert(d.pair_id.clone(), pos);
        self.log.push(d);
    }

    pub fn paths(&self) -> &StorePaths {
        &self.paths
    }

    pub fn pairs(&self) -> &[QnaPair] {
        &self.pairs
    }

    pub fn log(&self) -> &[ReviewDecision] {
        &self.log
    }

    /// Fail with [`StoreError::DatasetChanged`] if the dataset file no longer
    /// hashes to what was loaded.
    pub fn check_dataset(&self) -> Result<(), StoreError> {
        match sha256_file(&self.paths.dataset) {
            Ok(h) if h == self.dataset_hash => Ok(()),
            _ => Err(StoreError::DatasetChanged),
        }
    }

    fn decision_for(&self, pair_id: &str) -> Option<&ReviewDecision> {
        self.latest.get(pair_id).map(|&i| &self.log[i])
    }

    fn excerpt(&self, chunk_id: &str) -> Option<String> {
        self.chunks.get(chunk_id).map(|c| c.text.chars().take(EXCERPT_CHARS).collect())
    }

    pub fn queue(&self, filter: QueueFilter, offset: usize, limit: usize) -> QueuePage {
        let latest = latest_decisions(&self.log);
        let order = queue_order(&self.pairs, &latest, filter);
        let items = order
            .iter()
            .skip(offset)
            .take(limit)
            .map(|&i| {
                let p = &self.pairs[i];
                QueueItem {
                    pair_id: p.pair_id.clone(),
                    chunk_id: p.chunk_id.clone(),
                    question: p.question.clone(),
                    answer: p.answer.clone(),
                    question_type: p.question_type,
                    source_ref: p.source_ref.clone(),
                    similarity: p.similarity,
                    state: review_state(p, latest.get(p.pair_id.as_str()).copied()),
                    chunk_excerpt: self.excerpt(&p.chunk_id),
                }
            })
            .collect();
        QueuePage { status: filter, total: order.len(), offset, limit, items }
    }

    pub fn detail(&self, pair_id: &str) -> Result<PairDetail, StoreError> {
        let &i = self.index.get(pair_id).ok_or_else(|| StoreError::UnknownPair(pair_id.to_string()))?;
        let pair = self.pairs[i].clone();
        let decision = self.decision_for(pair_id).cloned();
        Ok(PairDetail {
            state: review_state(&pair, decision.as_ref()),
            chunk: self.chunks.get(&pair.chunk_id).cloned(),
            pair,
            decision,
        })
    }

    /// Validate, assign the next sequence number and append to the log
    /// before updating memory.
    pub fn decide(&mut self, pair_id: &str, req: DecisionRequest) -> Result<ReviewDecision, StoreError> {
        if !self.index.contains_key(pair_id) {
            return Err(StoreError::UnknownPair(pair_id.to_string()));
        }
        req.validate().map_err(StoreError::InvalidDecision)?;
        let seq = self.log.last().map_or(1, |d| d.decision_seq + 1);
        let timestamp = Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true);
        let decision = req.into_decision(pair_id, timestamp, seq);
        let mut line = serde_json::to_string(&decision).expect("decision serializes");
        line.push('\n');
        let path = self.paths.decisions.clone();
        self.writer.write_all(line.as_bytes()).map_err(io_err(&path))?;
        self.writer.sync_data().map_err(io_err(&path))?;
        self.record(decision.clone());
        Ok(decision)
    }

    pub fn stats(&self) -> Stats {
        let latest = latest_decisions(&self.log);
        let counts = state_counts(&self.pairs, &latest);
        Stats {
            decided: counts.accepted + counts.rejected + counts.edited,
            total: self.pairs.len(),
            counts,
            entropy_bits: self.report.as_ref().map(|r| r.entropy_bits),
            threshold: self.report.as_ref().map(|r| r.threshold),
        }
    }

    pub fn export(&self) -> String {
        export_jsonl(&self.pairs, &self.log)
    }
}

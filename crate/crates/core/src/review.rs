//! Review decisions, log replay, queue partitioning and the curated export.
//!
//! Everything here is pure; the HTTP service layers persistence and
//! concurrency on top.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{PairStatus, QnaPair};

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("invalid decision: {0}")]
    InvalidDecision(String),
    #[error("decision log line {line}: {reason}")]
    CorruptLog { line: usize, reason: String },
    #[error("dataset line {line}: {reason}")]
    Dataset { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Accept,
    Reject,
    Edit,
}

/// Body of a decision submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    pub verdict: Verdict,
    #[serde(default)]
    pub edited_question: Option<String>,
    #[serde(default)]
    pub edited_answer: Option<String>,
    pub reviewer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub pair_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_question: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edited_answer: Option<String>,
    pub reviewer: String,
    pub timestamp: String,
    pub decision_seq: u64,
}

fn check_fields(
    verdict: Verdict,
    edited_question: &Option<String>,
    edited_answer: &Option<String>,
    reviewer: &str,
) -> Result<(), String> {
    if reviewer.trim().is_empty() {
        return Err("reviewer must be non-empty".into());
    }
    let fields = [edited_question, edited_answer];
    match verdict {
        Verdict::Edit => {
            if fields.iter().all(|f| f.is_none()) {
                return Err("edit requires edited_question or edited_answer".into());
            }
            if fields.iter().any(|f| f.as_deref().is_some_and(|s| s.trim().is_empty())) {
                return Err("edited fields must be non-empty".into());
            }
        }
        Verdict::Accept | Verdict::Reject => {
            if fields.iter().any(|f| f.is_some()) {
                return Err("edited fields are only allowed with verdict edit".into());
            }
        }
    }
    Ok(())
}

impl DecisionRequest {
    pub fn validate(&self) -> Result<(), ReviewError> {
        check_fields(self.verdict, &self.edited_question, &self.edited_answer, &self.reviewer)
            .map_err(ReviewError::InvalidDecision)
    }

    pub fn into_decision(self, pair_id: &str, timestamp: String, decision_seq: u64) -> ReviewDecision {
        ReviewDecision {
            pair_id: pair_id.to_string(),
            verdict: self.verdict,
            edited_question: self.edited_question,
            edited_answer: self.edited_answer,
            reviewer: self.reviewer,
            timestamp,
            decision_seq,
        }
    }
}

impl ReviewDecision {
    pub fn validate(&self) -> Result<(), String> {
        check_fields(self.verdict, &self.edited_question, &self.edited_answer, &self.reviewer)?;
        chrono::DateTime::parse_from_rfc3339(&self.timestamp)
            .map_err(|e| format!("timestamp: {e}"))?;
        Ok(())
    }

    pub fn status(&self) -> PairStatus {
        match self.verdict {
            Verdict::Accept => PairStatus::Accepted,
            Verdict::Reject => PairStatus::Rejected,
            Verdict::Edit => PairStatus::Edited,
        }
    }

    /// The pair as it appears in the export, or `None` when rejected.
    pub fn apply(&self, pair: &QnaPair) -> Option<QnaPair> {
        let mut out = pair.clone();
        match self.verdict {
            Verdict::Reject => return None,
            Verdict::Accept => {}
            Verdict::Edit => {
                if let Some(q) = &self.edited_question {
                    out.question = q.clone();
                }
                if let Some(a) = &self.edited_answer {
                    out.answer = a.clone();
                }
            }
        }
        out.status = self.status();
        Some(out)
    }
}

/// Parse and validate a dataset file: one pair per line, unique ids.
pub fn parse_dataset(text: &str) -> Result<Vec<QnaPair>, ReviewError> {
    let pairs: Vec<QnaPair> = crate::jsonl::parse(text).map_err(|e| match e {
        crate::jsonl::JsonlError::Line { line, reason } => ReviewError::Dataset { line, reason },
        other => ReviewError::Dataset { line: 0, reason: other.to_string() },
    })?;
    let mut seen = HashSet::new();
    for (i, p) in pairs.iter().enumerate() {
        if !seen.insert(p.pair_id.as_str()) {
            return Err(ReviewError::Dataset { line: i + 1, reason: format!("duplicate pair_id {}", p.pair_id) });
        }
    }
    Ok(pairs)
}

/// Parse a decision log, checking each record, that `decision_seq` strictly
/// increases, and that every decision refers to a pair in `known`.
pub fn parse_log(text: &str, known: &HashSet<&str>) -> Result<Vec<ReviewDecision>, ReviewError> {
    let mut out: Vec<ReviewDecision> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let corrupt = |reason: String| ReviewError::CorruptLog { line: line_no, reason };
        let d: ReviewDecision = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        d.validate().map_err(corrupt)?;
        if let Some(prev) = out.last() {
            if d.decision_seq <= prev.decision_seq {
                return Err(corrupt(format!(
                    "decision_seq {} does not follow {}",
                    d.decision_seq, prev.decision_seq
                )));
            }
        }
        if !known.contains(d.pair_id.as_str()) {
            return Err(corrupt(format!("unknown pair_id {}", d.pair_id)));
        }
        out.push(d);
    }
    Ok(out)
}

/// The winning decision per pair: highest `decision_seq`.
pub fn latest_decisions(log: &[ReviewDecision]) -> HashMap<&str, &ReviewDecision> {
    let mut map: HashMap<&str, &ReviewDecision> = HashMap::new();
    for d in log {
        match map.get(d.pair_id.as_str()) {
            Some(cur) if cur.decision_seq >= d.decision_seq => {}
            _ => {
                map.insert(d.pair_id.as_str(), d);
            }
        }
    }
    map
}

/// Curated pairs in dataset order: accepted ones unchanged, edited ones with
/// their edits applied; rejected and undecided pairs are dropped.
pub fn curated_pairs(dataset: &[QnaPair], log: &[ReviewDecision]) -> Vec<QnaPair> {
    let latest = latest_decisions(log);
    dataset
        .iter()
        .filter_map(|p| latest.get(p.pair_id.as_str()).and_then(|d| d.apply(p)))
        .collect()
}

/// JSON-lines rendering of [`curated_pairs`].
pub fn export_jsonl(dataset: &[QnaPair], log: &[ReviewDecision]) -> String {
    crate::jsonl::to_string(&curated_pairs(dataset, log))
}

/// Where an individual pair currently sits in the review workflow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewState {
    Pending,
    Flagged,
    Accepted,
    Rejected,
    Edited,
}

pub fn review_state(pair: &QnaPair, decision: Option<&ReviewDecision>) -> ReviewState {
    match decision.map(|d| d.verdict) {
        Some(Verdict::Accept) => ReviewState::Accepted,
        Some(Verdict::Reject) => ReviewState::Rejected,
        Some(Verdict::Edit) => ReviewState::Edited,
        None if pair.status == PairStatus::Flagged => ReviewState::Flagged,
        None => ReviewState::Pending,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueFilter {
    Flagged,
    Pending,
    Accepted,
    Rejected,
    Edited,
    All,
}

impl QueueFilter {
    pub fn admits(self, state: ReviewState) -> bool {
        match self {
            Self::All => true,
            Self::Flagged => state == ReviewState::Flagged,
            Self::Pending => state == ReviewState::Pending,
            Self::Accepted => state == ReviewState::Accepted,
            Self::Rejected => state == ReviewState::Rejected,
            Self::Edited => state == ReviewState::Edited,
        }
    }
}

/// Indices of pairs admitted by `filter`, worst similarity first (unscored
/// last), ties by pair id.
pub fn queue_order(
    dataset: &[QnaPair],
    latest: &HashMap<&str, &ReviewDecision>,
    filter: QueueFilter,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..dataset.len())
        .filter(|&i| {
            let p = &dataset[i];
            filter.admits(review_state(p, latest.get(p.pair_id.as_str()).copied()))
        })
        .collect();
    idx.sort_by(|&a, &b| {
        let (pa, pb) = (&dataset[a], &dataset[b]);
        let key = |s: Option<f64>| s.unwrap_or(f64::INFINITY);
        key(pa.similarity).total_cmp(&key(pb.similarity)).then_with(|| pa.pair_id.cmp(&pb.pair_id))
    });
    idx
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounts {
    pub pending: usize,
    pub flagged: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub edited: usize,
}

pub fn state_counts(dataset: &[QnaPair], latest: &HashMap<&str, &ReviewDecision>) -> StateCounts {
    let mut c = StateCounts::default();
    for p in dataset {
        match review_state(p, latest.get(p.pair_id.as_str()).copied()) {
            ReviewState::Pending => c.pending += 1,
            ReviewState::Flagged => c.flagged += 1,
            ReviewState::Accepted => c.accepted += 1,
            ReviewState::Rejected => c.rejected += 1,
            ReviewState::Edited => c.edited += 1,
        }
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::QuestionType;

    fn pair(id: &str, sim: f64, status: PairStatus) -> QnaPair {
        QnaPair {
            pair_id: id.into(),
            chunk_id: "d#0000".into(),
            question: format!("q {id}"),
            answer: format!("a {id}"),
            question_type: QuestionType::FundamentalRecall,
            source_ref: "d p. 1".into(),
            similarity: Some(sim),
            status,
        }
    }

    fn decision(id: &str, verdict: Verdict, seq: u64) -> ReviewDecision {
        ReviewDecision {
            pair_id: id.into(),
            verdict,
            edited_question: None,
            edited_answer: (verdict == Verdict::Edit).then(|| "new answer".to_string()),
            reviewer: "r".into(),
            timestamp: "2024-01-01T00:00:00Z".into(),
            decision_seq: seq,
        }
    }

    fn dataset() -> Vec<QnaPair> {
        vec![
            pair("p1", 0.5, PairStatus::Flagged),
            pair("p2", 0.9, PairStatus::Pending),
            pair("p3", 0.7, PairStatus::Flagged),
        ]
    }

    #[test]
    fn export_contains_only_accepted() {
        let log = vec![decision("p1", Verdict::Accept, 1), decision("p2", Verdict::Reject, 2)];
        let out = curated_pairs(&dataset(), &log);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].pair_id, "p1");
        assert_eq!(out[0].answer, "a p1");
        assert_eq!(out[0].status, PairStatus::Accepted);
    }

    #[test]
    fn later_accept_supersedes_edit() {
        let log = vec![decision("p1", Verdict::Edit, 1), decision("p1", Verdict::Accept, 2)];
        let out = curated_pairs(&dataset(), &log);
        assert_eq!(out[0].answer, "a p1");
        let log = vec![decision("p1", Verdict::Accept, 1), decision("p1", Verdict::Edit, 2)];
        let out = curated_pairs(&dataset(), &log);
        assert_eq!((out[0].answer.as_str(), out[0].status), ("new answer", PairStatus::Edited));
    }

    #[test]
    fn request_validation() {
        let mut req = DecisionRequest { verdict: Verdict::Edit, edited_question: None, edited_answer: None, reviewer: "r".into() };
        assert!(req.validate().is_err());
        req.edited_answer = Some("  ".into());
        assert!(req.validate().is_err());
        req.edited_answer = Some("fine".into());
        assert!(req.validate().is_ok());
        req.verdict = Verdict::Accept;
        assert!(req.validate().is_err());
        req.edited_answer = None;
        req.reviewer = String::new();
        assert!(req.validate().is_err());
    }

    #[test]
    fn log_replay_rejects_bad_lines() {
        let ds = dataset();
        let known: HashSet<&str> = ds.iter().map(|p| p.pair_id.as_str()).collect();
        let good = crate::jsonl::to_string(&[decision("p1", Verdict::Accept, 1), decision("p2", Verdict::Reject, 3)]);
        assert_eq!(parse_log(&good, &known).unwrap().len(), 2);

        let regress = crate::jsonl::to_string(&[decision("p1", Verdict::Accept, 2), decision("p2", Verdict::Reject, 2)]);
        assert!(matches!(parse_log(&regress, &known), Err(ReviewError::CorruptLog { line: 2, .. })));
        let garbage = format!("{good}not json\n");
        assert!(matches!(parse_log(&garbage, &known), Err(ReviewError::CorruptLog { line: 3, .. })));
        let unknown = crate::jsonl::to_string(&[decision("zz", Verdict::Accept, 1)]);
        assert!(matches!(parse_log(&unknown, &known), Err(ReviewError::CorruptLog { line: 1, .. })));
    }

    #[test]
    fn queue_partitions_and_orders() {
        let ds = dataset();
        let log = vec![decision("p3", Verdict::Accept, 1)];
        let latest = latest_decisions(&log);
        assert_eq!(queue_order(&ds, &latest, QueueFilter::Flagged), vec![0]);
        assert_eq!(queue_order(&ds, &latest, QueueFilter::Pending), vec![1]);
        assert_eq!(queue_order(&ds, &latest, QueueFilter::All), vec![0, 2, 1]);
        let c = state_counts(&ds, &latest);
        assert_eq!(c, StateCounts { pending: 1, flagged: 1, accepted: 1, rejected: 0, edited: 0 });
    }

    #[test]
    fn duplicate_pair_ids_rejected() {
        let text = crate::jsonl::to_string(&[pair("p1", 0.5, PairStatus::Pending), pair("p1", 0.6, PairStatus::Pending)]);
        assert!(matches!(parse_dataset(&text), Err(ReviewError::Dataset { line: 2, .. })));
    }
}

//! Dataset quality metrics: question-to-chunk cosine relevance with threshold
//! flagging, pooled Shannon entropy of question wording, and a benchmark
//! overlay projection for semantic diversity.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::embedding::{EmbedError, Embedder, Vector};
use crate::llm::{PairStatus, QnaPair, QuestionType};
use crate::projection::{scatter_export, tsne, ProjectionError, ScatterFormat, TsneConfig, TsneOutput};
use crate::text::tokenize;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.80;
pub const HISTOGRAM_BINS: usize = 20;
/// Entropy reported for a comparable generated question set; kept in the
/// report as a point of comparison only.
pub const REFERENCE_ENTROPY_BITS: f64 = 6.63;
/// Neighbors averaged when scoring a benchmark question.
pub const BENCHMARK_TOP_K: usize = 5;

const BUNDLED_BENCHMARK: &str = include_str!("../assets/benchmark.json");

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("missing vectors for pairs: {}", .0.join(", "))]
    MissingVectors(Vec<String>),
    #[error("no tokens in the question set")]
    NoTokens,
    #[error("benchmark set: {0}")]
    Benchmark(String),
    #[error("need at least {needed} generated questions, got {got}")]
    TooFewQuestions { needed: usize, got: usize },
    #[error("nothing to report")]
    NothingToReport,
    #[error("report invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
}

/// dot(u, v) / (|u| |v|), clamped to [-1, 1].
pub fn cosine_similarity(u: &Vector, v: &Vector) -> Result<f64, EvalError> {
    if u.values.len() != v.values.len() {
        return Err(EvalError::DimensionMismatch(u.values.len(), v.values.len()));
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Equal-width bins over [0, 1]; right-open except the last, which is closed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    /// Values below 0 that were counted in bin 0.
    pub clamped_below_zero: usize,
}

impl Histogram {
    pub fn new(bins: usize) -> Self {
        Self { counts: vec![0; bins], clamped_below_zero: 0 }
    }

    pub fn bin_of(&self, value: f64) -> usize {
        let bins = self.counts.len();
        if value <= 0.0 {
            return 0;
        }
        ((value * bins as f64).floor() as usize).min(bins - 1)
    }

    pub fn add(&mut self, value: f64) {
        if value < 0.0 {
            self.clamped_below_zero += 1;
        }
        let b = self.bin_of(value);
        self.counts[b] += 1;
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `[lower, upper)` edges of bin `i`.
    pub fn edges(&self, i: usize) -> (f64, f64) {
        let w = 1.0 / self.counts.len() as f64;
        (i as f64 * w, (i + 1) as f64 * w)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_start,bin_end,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.edges(i);
            writeln!(out, "{lo:.2},{hi:.2},{c}").unwrap();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelevanceReport {
    pub pairs: Vec<QnaPair>,
    pub histogram: Histogram,
    /// Ordered by similarity ascending, then pair id.
    pub flagged: Vec<String>,
}

/// Score each pair by question/chunk cosine and flag those strictly below
/// `threshold`.
pub fn relevance_report(
    pairs: &[QnaPair],
    chunk_vecs: &HashMap<String, Vector>,
    question_vecs: &HashMap<String, Vector>,
    threshold: f64,
) -> Result<RelevanceReport, EvalError> {
    let missing: Vec<String> = pairs
        .iter()
        .filter(|p| !chunk_vecs.contains_key(&p.chunk_id) || !question_vecs.contains_key(&p.pair_id))
        .map(|p| p.pair_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingVectors(missing));
    }
    let mut histogram = Histogram::new(HISTOGRAM_BINS);
    let mut scored = Vec::with_capacity(pairs.len());
    let mut flagged: Vec<(f64, String)> = Vec::new();
    for pair in pairs {
        let sim = cosine_similarity(&question_vecs[&pair.pair_id], &chunk_vecs[&pair.chunk_id])?;
        histogram.add(sim);
        let mut p = pair.clone();
        p.similarity = Some(sim);
        if sim < threshold {
            if p.status == PairStatus::Pending {
                p.status = PairStatus::Flagged;
            }
            flagged.push((sim, p.pair_id.clone()));
        }
        scored.push(p);
    }
    if histogram.clamped_below_zero > 0 {
        warn!(count = histogram.clamped_below_zero, "negative similarities counted in bin 0");
    }
    flagged.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    Ok(RelevanceReport { pairs: scored, histogram, flagged: flagged.into_iter().map(|(_, id)| id).collect() })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntropyStats {
    pub entropy_bits: f64,
    pub vocab_size: usize,
    pub token_count: usize,
}

/// Entropy in bits of the pooled token distribution over all questions.
pub fn shannon_entropy<S: AsRef<str>>(questions: &[S]) -> Result<EntropyStats, EvalError> {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for q in questions {
        for t in tokenize(q.as_ref()) {
            *freq.entry(t).or_default() += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::NoTokens);
    }
    let entropy: f64 = freq
        .values()
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.log2()
        })
        .sum();
    Ok(EntropyStats { entropy_bits: entropy.max(0.0), vocab_size: freq.len(), token_count: total })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchmarkLabel {
    OutOfDomain,
    InDomain,
}

impl BenchmarkLabel {
    pub fn point_label(self) -> &'static str {
        match self {
            Self::OutOfDomain => "benchmark_out_of_domain",
            Self::InDomain => "benchmark_in_domain",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkQuestion {
    pub text: String,
    pub label: BenchmarkLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BenchmarkSet {
    pub questions: Vec<BenchmarkQuestion>,
}

impl BenchmarkSet {
    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        let set: BenchmarkSet =
            serde_json::from_str(text).map_err(|e| EvalError::Benchmark(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Benchmark(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Four MLOps-tooling questions and one power-systems question.
    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_BENCHMARK).expect("bundled benchmark is valid")
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.questions.is_empty() {
            return Err(EvalError::Benchmark("benchmark set is empty".into()));
        }
        if self.questions.iter().any(|q| q.text.trim().is_empty()) {
            return Err(EvalError::Benchmark("benchmark question with empty text".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkScore {
    pub text: String,
    pub label: BenchmarkLabel,
    /// Mean cosine to the nearest generated questions.
    pub mean_top_k_cosine: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiversityProjection {
    pub projection: TsneOutput,
    pub labels: Vec<String>,
    pub scores: Vec<BenchmarkScore>,
    pub csv_path: PathBuf,
    pub svg_path: PathBuf,
}

/// Mean of the `k` largest cosines between `query` and `pool`.
pub fn mean_top_k_cosine(query: &Vector, pool: &[Vector], k: usize) -> Result<f64, EvalError> {
    let mut sims = pool.iter().map(|v| cosine_similarity(query, v)).collect::<Result<Vec<_>, _>>()?;
    sims.sort_by(|a, b| b.total_cmp(a));
    let take = k.min(sims.len()).max(1);
    Ok(sims.iter().take(take).sum::<f64>() / take as f64)
}

/// Embed the benchmark with `embedder`, project it together with the
/// generated question vectors, write `<stem>.csv` and `<stem>.svg`, and
/// score each benchmark question by its mean top-5 cosine to the generated set.
pub fn diversity_projection(
    question_vecs: &[Vector],
    benchmark: &BenchmarkSet,
    embedder: &Embedder,
    tsne_cfg: &TsneConfig,
    out_stem: &Path,
) -> Result<DiversityProjection, EvalError> {
    benchmark.validate()?;
    if question_vecs.len() < 3 {
        return Err(EvalError::TooFewQuestions { needed: 3, got: question_vecs.len() });
    }
    let texts: Vec<String> = benchmark.questions.iter().map(|q| q.text.clone()).collect();
    let bench_vecs = embedder.embed(&texts)?;

    let mut scores = Vec::with_capacity(bench_vecs.len());
    for (q, v) in benchmark.questions.iter().zip(&bench_vecs) {
        scores.push(BenchmarkScore {
            text: q.text.clone(),
            label: q.label,
            mean_top_k_cosine: mean_top_k_cosine(v, question_vecs, BENCHMARK_TOP_K)?,
        });
    }

    let mut all: Vec<Vector> = question_vecs.to_vec();
    all.extend(bench_vecs);
    let mut labels: Vec<String> = vec!["generated".to_string(); question_vecs.len()];
    labels.extend(benchmark.questions.iter().map(|q| q.label.point_label().to_string()));

    let projection = tsne(&all, tsne_cfg)?;
    let csv_path = out_stem.with_extension("csv");
    let svg_path = out_stem.with_extension("svg");
    scatter_export(&projection.coords, &labels, &csv_path, ScatterFormat::Csv)?;
    scatter_export(&projection.coords, &labels, &svg_path, ScatterFormat::Svg)?;
    Ok(DiversityProjection { projection, labels, scores, csv_path, svg_path })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendIds {
    pub embedding: String,
    pub generation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub run_id: String,
    pub threshold: f64,
    pub scored_pairs: usize,
    pub flagged_count: usize,
    pub mean_similarity: f64,
    pub entropy_bits: f64,
    pub vocab_size: usize,
    pub token_count: usize,
    pub reference_entropy_bits: f64,
    pub histogram: Histogram,
    pub flagged_pair_ids: Vec<String>,
    pub counts_by_type: BTreeMap<QuestionType, usize>,
    pub projection_ref: Option<String>,
    pub benchmark_scores: Vec<BenchmarkScore>,
    pub backend_ids: BackendIds,
}

pub struct ReportInputs<'a> {
    pub run_id: String,
    pub threshold: f64,
    pub relevance: &'a RelevanceReport,
    pub entropy: EntropyStats,
    pub projection_ref: Option<String>,
    pub benchmark_scores: Vec<BenchmarkScore>,
    pub backend_ids: BackendIds,
}

/// Assemble and check the report.
pub fn build_report(inputs: ReportInputs<'_>) -> Result<EvaluationReport, EvalError> {
    let rel = inputs.relevance;
    if rel.pairs.is_empty() {
        return Err(EvalError::NothingToReport);
    }
    let sims: Vec<f64> = rel.pairs.iter().filter_map(|p| p.similarity).collect();
    if sims.len() != rel.pairs.len() {
        return Err(EvalError::Invariant("every pair must be scored".into()));
    }
    if rel.histogram.total() != rel.pairs.len() {
        return Err(EvalError::Invariant("histogram total differs from pair count".into()));
    }
    let by_id: HashMap<&str, f64> =
        rel.pairs.iter().map(|p| (p.pair_id.as_str(), p.similarity.unwrap_or(f64::NAN))).collect();
    if rel.flagged.iter().any(|id| !(by_id.get(id.as_str()).copied().unwrap_or(f64::NAN) < inputs.threshold)) {
        return Err(EvalError::Invariant("flagged pair at or above threshold".into()));
    }
    if inputs.entropy.entropy_bits > (inputs.entropy.vocab_size as f64).log2() + 1e-9 {
        return Err(EvalError::Invariant("entropy exceeds log2(vocab_size)".into()));
    }
    let mut counts_by_type: BTreeMap<QuestionType, usize> =
        QuestionType::ALL.iter().map(|&t| (t, 0)).collect();
    for p in &rel.pairs {
        *counts_by_type.entry(p.question_type).or_default() += 1;
    }
    Ok(EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        run_id: inputs.run_id,
        threshold: inputs.threshold,
        scored_pairs: rel.pairs.len(),
        flagged_count: rel.flagged.len(),
        mean_similarity: sims.iter().sum::<f64>() / sims.len() as f64,
        entropy_bits: inputs.entropy.entropy_bits,
        vocab_size: inputs.entropy.vocab_size,
        token_count: inputs.entropy.token_count,
        reference_entropy_bits: REFERENCE_ENTROPY_BITS,
        histogram: rel.histogram.clone(),
        flagged_pair_ids: rel.flagged.clone(),
        counts_by_type,
        projection_ref: inputs.projection_ref,
        benchmark_scores: inputs.benchmark_scores,
        backend_ids: inputs.backend_ids,
    })
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Plain-text summary with the histogram drawn as bars.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        writeln!(out, "run {}", self.run_id).unwrap();
        writeln!(
            out,
            "question entropy: {:.2} bits over {} distinct tokens (reference {:.2})",
            self.entropy_bits, self.vocab_size, self.reference_entropy_bits
        )
        .unwrap();
        writeln!(
            out,
            "flagged: {}/{} pairs below similarity {:.2} (mean similarity {:.3})",
            self.flagged_count, self.scored_pairs, self.threshold, self.mean_similarity
        )
        .unwrap();
        for (t, c) in &self.counts_by_type {
            writeln!(out, "  {:<22} {c}", t.as_str()).unwrap();
        }
        writeln!(out, "similarity histogram:").unwrap();
        let peak = self.histogram.counts.iter().copied().max().unwrap_or(0).max(1);
        for (i, &c) in self.histogram.counts.iter().enumerate() {
            let (lo, hi) = self.histogram.edges(i);
            let bar = "#".repeat((c * 40).div_ceil(peak));
            writeln!(out, "  [{lo:.2}, {hi:.2}{} {c:>4} {bar}", if i + 1 == self.histogram.counts.len() { "]" } else { ")" }).unwrap();
        }
        if !self.benchmark_scores.is_empty() {
            writeln!(out, "benchmark mean top-{BENCHMARK_TOP_K} cosine:").unwrap();
            for s in &self.benchmark_scores {
                writeln!(out, "  {:<24} {:.3}  {}", s.label.point_label(), s.mean_top_k_cosine, s.text).unwrap();
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> Vector {
        Vector::new(values.to_vec()).unwrap()
    }

    fn pair(id: &str, chunk: &str) -> QnaPair {
        QnaPair {
            pair_id: id.into(),
            chunk_id: chunk.into(),
            question: format!("question {id}"),
            answer: "answer".into(),
            question_type: QuestionType::FundamentalRecall,
            source_ref: "d p. 1".into(),
            similarity: None,
            status: PairStatus::Pending,
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((c - 0.70710678).abs() < 1e-8);
        assert!(matches!(cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])), Err(EvalError::ZeroVector)));
        assert!(matches!(cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])), Err(EvalError::DimensionMismatch(1, 2))));
    }

    #[test]
    fn histogram_bins() {
        let mut h = Histogram::new(20);
        for x in [0.0, 0.049, 0.05, 0.5, 0.95, 0.9999, 1.0, -0.3] {
            h.add(x);
        }
        assert_eq!(h.counts[0], 3);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[10], 1);
        assert_eq!(h.counts[19], 3);
        assert_eq!(h.clamped_below_zero, 1);
        assert_eq!(h.total(), 8);
    }

    #[test]
    fn identical_vectors_fill_top_bin() {
        let pairs: Vec<QnaPair> = (0..5).map(|i| pair(&format!("p{i}"), "c")).collect();
        let chunk_vecs = HashMap::from([("c".to_string(), v(&[0.6, 0.8]))]);
        let q: HashMap<String, Vector> = pairs.iter().map(|p| (p.pair_id.clone(), v(&[0.6, 0.8]))).collect();
        let r = relevance_report(&pairs, &chunk_vecs, &q, DEFAULT_THRESHOLD).unwrap();
        assert!(r.flagged.is_empty());
        assert_eq!(r.histogram.counts[19], 5);
        assert!(r.pairs.iter().all(|p| p.status == PairStatus::Pending));
    }

    #[test]
    fn orthogonal_question_is_flagged() {
        let pairs = vec![pair("p", "c")];
        let chunk_vecs = HashMap::from([("c".to_string(), v(&[1.0, 0.0]))]);
        let q = HashMap::from([("p".to_string(), v(&[0.0, 1.0]))]);
        let r = relevance_report(&pairs, &chunk_vecs, &q, DEFAULT_THRESHOLD).unwrap();
        assert_eq!(r.flagged, vec!["p"]);
        assert_eq!(r.pairs[0].similarity, Some(0.0));
        assert_eq!(r.pairs[0].status, PairStatus::Flagged);
    }

    #[test]
    fn missing_vectors_listed() {
        let pairs = vec![pair("p1", "c"), pair("p2", "c")];
        let chunk_vecs = HashMap::from([("c".to_string(), v(&[1.0, 0.0]))]);
        let q = HashMap::from([("p1".to_string(), v(&[1.0, 0.0]))]);
        match relevance_report(&pairs, &chunk_vecs, &q, 0.8) {
            Err(EvalError::MissingVectors(ids)) => assert_eq!(ids, vec!["p2"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn entropy_examples() {
        let e = shannon_entropy(&["alpha"]).unwrap();
        assert_eq!((e.entropy_bits, e.vocab_size), (0.0, 1));
        let e = shannon_entropy(&["a b", "c d"]).unwrap();
        assert_eq!((e.entropy_bits, e.vocab_size), (2.0, 4));
        let e = shannon_entropy(&["a a b"]).unwrap();
        assert!((e.entropy_bits - 0.91829583).abs() < 1e-6);
        assert!(matches!(shannon_entropy(&["?!"]), Err(EvalError::NoTokens)));
        assert!(matches!(shannon_entropy::<&str>(&[]), Err(EvalError::NoTokens)));
    }

    #[test]
    fn bundled_benchmark_shape() {
        let b = BenchmarkSet::bundled();
        assert_eq!(b.questions.len(), 5);
        assert_eq!(b.questions.iter().filter(|q| q.label == BenchmarkLabel::OutOfDomain).count(), 4);
        assert!(BenchmarkSet::from_json("[]").is_err());
        assert!(BenchmarkSet::from_json(r#"[{"text":"x","label":"other"}]"#).is_err());
    }

    fn scored(n: usize, flagged: usize) -> RelevanceReport {
        let chunk_vecs = HashMap::from([("c".to_string(), v(&[1.0, 0.0]))]);
        let pairs: Vec<QnaPair> = (0..n).map(|i| pair(&format!("p{i:02}"), "c")).collect();
        let q: HashMap<String, Vector> = pairs
            .iter()
            .enumerate()
            .map(|(i, p)| (p.pair_id.clone(), if i < flagged { v(&[0.5, 0.5]) } else { v(&[1.0, 0.1]) }))
            .collect();
        relevance_report(&pairs, &chunk_vecs, &q, DEFAULT_THRESHOLD).unwrap()
    }

    fn inputs(rel: &RelevanceReport) -> ReportInputs<'_> {
        ReportInputs {
            run_id: "run-1".into(),
            threshold: DEFAULT_THRESHOLD,
            relevance: rel,
            entropy: shannon_entropy(&["a b c", "a d"]).unwrap(),
            projection_ref: None,
            benchmark_scores: vec![],
            backend_ids: BackendIds { embedding: "e".into(), generation: "g".into() },
        }
    }

    #[test]
    fn report_counts_and_round_trip() {
        let rel = scored(10, 2);
        let report = build_report(inputs(&rel)).unwrap();
        assert_eq!(report.scored_pairs, 10);
        assert_eq!(report.flagged_count, 2);
        assert_eq!(report.histogram.total(), 10);
        assert_eq!(report.counts_by_type[&QuestionType::FundamentalRecall], 10);
        assert_eq!(report.counts_by_type[&QuestionType::MultiStepAnalytical], 0);
        let json = report.to_json();
        let again = EvaluationReport::from_json(&json).unwrap().to_json();
        assert_eq!(json, again);
        assert!(report.summary().contains("flagged: 2/10"));
    }

    #[test]
    fn empty_report_is_error() {
        let rel = RelevanceReport { pairs: vec![], histogram: Histogram::new(20), flagged: vec![] };
        assert!(matches!(build_report(inputs(&rel)), Err(EvalError::NothingToReport)));
    }
}

//! The pipeline stages. Each reads its predecessors' files from the run
//! directory, writes its own, and records a manifest entry.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use synthqa_core::clustering::{kmeans, kmeans_auto, ClusterModel};
use synthqa_core::embedding::{EmbedError, Embedder, Vector};
use synthqa_core::evaluation::{
    build_report, diversity_projection, relevance_report, shannon_entropy, BackendIds, BenchmarkSet, EvalError,
    ReportInputs,
};
use synthqa_core::ingest::{chunk_document, load_document, sample_corpus, Chunk, DocumentFormat, SAMPLE_CORPUS};
use synthqa_core::jsonl;
use synthqa_core::llm::{Gateway, GenBackendConfig, GenError, QnaPair, Summary};
use synthqa_core::projection::{scatter_export, tsne, ScatterFormat, TsneConfig};
use synthqa_core::review::{export_jsonl, parse_dataset, parse_log};
use tracing::{info, warn};

use crate::config::{stage_seed, RunConfig};
use crate::error::PipelineError;
use crate::manifest::{hash_file, sha256_hex, stage_timestamp, Manifest, StageEntry};

pub const CHUNKS_FILE: &str = "chunks.jsonl";
pub const SUMMARIES_FILE: &str = "summaries.jsonl";
pub const VECTORS_FILE: &str = "vectors.json";
pub const CLUSTERS_FILE: &str = "clusters.json";
pub const CLUSTER_SCATTER_STEM: &str = "cluster_scatter";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const SCORED_PAIRS_FILE: &str = "scored_pairs.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const REPORT_TEXT_FILE: &str = "report.txt";
pub const HISTOGRAM_FILE: &str = "similarity_histogram.csv";
pub const DIVERSITY_STEM: &str = "diversity_scatter";
pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const CURATED_FILE: &str = "curated.jsonl";

pub const VECTORS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Summarize,
    Embed,
    Cluster,
    Generate,
    Evaluate,
    Export,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Ingest,
        Stage::Summarize,
        Stage::Embed,
        Stage::Cluster,
        Stage::Generate,
        Stage::Evaluate,
        Stage::Export,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Summarize => "summarize",
            Stage::Embed => "embed",
            Stage::Cluster => "cluster",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
            Stage::Export => "export",
        }
    }
}

/// Chunk vectors as written by `embed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorsFile {
    pub schema_version: u32,
    pub backend_id: String,
    pub dim: usize,
    pub chunk_ids: Vec<String>,
    pub vectors: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClustersFile {
    pub chunk_ids: Vec<String>,
    pub model: ClusterModel,
}

#[derive(Debug, Clone, Default)]
pub struct StageOutcome {
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

struct Recorder<'a> {
    cfg: &'a RunConfig,
    stage: Stage,
    seed: u64,
    inputs: BTreeMap<String, String>,
    outputs: Vec<String>,
    warnings: Vec<String>,
    backend: Option<String>,
}

impl<'a> Recorder<'a> {
    fn new(cfg: &'a RunConfig, stage: Stage) -> Result<Self, PipelineError> {
        std::fs::create_dir_all(&cfg.out_dir).map_err(|e| PipelineError::io(&cfg.out_dir, e))?;
        info!(stage = stage.name(), "stage start");
        Ok(Self {
            cfg,
            stage,
            seed: stage_seed(stage.name(), cfg.seed),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            warnings: Vec::new(),
            backend: None,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir.join(name)
    }

    /// Path of a predecessor's output, failing with a message naming that stage.
    fn require(&mut self, name: &str, producer: Stage) -> Result<PathBuf, PipelineError> {
        let p = self.path(name);
        if !p.is_file() {
            return Err(PipelineError::MissingStage { stage: producer.name(), path: p.display().to_string() });
        }
        self.inputs.insert(name.to_string(), hash_file(&p)?);
        Ok(p)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), PipelineError> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| PipelineError::io(&p, e))?;
        self.produced(name);
        Ok(())
    }

    fn produced(&mut self, name: &str) {
        self.outputs.push(name.to_string());
    }

    fn warn(&mut self, message: String) {
        warn!(stage = self.stage.name(), "{message}");
        self.warnings.push(message);
    }

    fn finish(self) -> Result<StageOutcome, PipelineError> {
        let dir = &self.cfg.out_dir;
        let mut outputs = BTreeMap::new();
        for name in &self.outputs {
            outputs.insert(name.clone(), hash_file(&dir.join(name))?);
        }
        let mut manifest = Manifest::load_or_new(dir, &self.cfg.run_id(), self.cfg.seed)?;
        manifest.stages.insert(
            self.stage.name().to_string(),
            StageEntry {
                seed: self.seed,
                config_hash: self.cfg.config_hash(),
                inputs: self.inputs,
                outputs,
                timestamp: stage_timestamp(self.cfg.is_offline()),
                backend: self.backend,
                warnings: self.warnings.clone(),
            },
        );
        manifest.save(dir)?;
        info!(stage = self.stage.name(), outputs = self.outputs.len(), "stage done");
        Ok(StageOutcome { outputs: self.outputs, warnings: self.warnings })
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    jsonl::read(path).map_err(|e| PipelineError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::io(path, e))
}

fn pretty_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn gen_error(stage: Stage, e: GenError) -> PipelineError {
    match e {
        GenError::Config(m) | GenError::Precondition(m) => PipelineError::Validation(m),
        other => PipelineError::Backend { stage: stage.name(), message: other.to_string() },
    }
}

fn embed_error(stage: Stage, e: EmbedError) -> PipelineError {
    match e {
        EmbedError::Backend(_) | EmbedError::Response(_) => {
            PipelineError::Backend { stage: stage.name(), message: e.to_string() }
        }
        other => PipelineError::Validation(format!("{}: {other}", stage.name())),
    }
}

fn eval_error(e: EvalError) -> PipelineError {
    match e {
        EvalError::Embed(inner) => embed_error(Stage::Evaluate, inner),
        other => PipelineError::Validation(format!("evaluate: {other}")),
    }
}

fn gateway(cfg: &RunConfig, seed: u64) -> Result<Gateway, PipelineError> {
    let gen = GenBackendConfig { seed, ..cfg.generation.clone() };
    Gateway::new(&gen).map_err(|e| gen_error(Stage::Generate, e))
}

fn stage_tsne(cfg: &RunConfig, seed: u64) -> TsneConfig {
    TsneConfig { seed, ..cfg.tsne.clone() }
}

pub fn ingest(cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, Stage::Ingest)?;
    let docs = if cfg.corpus.is_empty() {
        rec.inputs.insert("bundled:sample_corpus.md".into(), sha256_hex(SAMPLE_CORPUS.as_bytes()));
        vec![sample_corpus()]
    } else {
        let mut docs = Vec::new();
        for input in &cfg.corpus {
            let format = input.format.unwrap_or_else(|| DocumentFormat::from_path(&input.path));
            let doc =
                load_document(&input.path, format).map_err(|e| PipelineError::Validation(format!("ingest: {e}")))?;
            rec.inputs.insert(input.path.display().to_string(), hash_file(&input.path)?);
            docs.push(doc);
        }
        docs
    };
    let mut seen = std::collections::HashSet::new();
    for d in &docs {
        if !seen.insert(d.doc_id.clone()) {
            return Err(PipelineError::Validation(format!("ingest: duplicate doc_id {}", d.doc_id)));
        }
    }
    let chunks: Vec<Chunk> = docs.iter().flat_map(|d| chunk_document(d, &cfg.chunking)).collect();
    if chunks.is_empty() {
        return Err(PipelineError::Validation("ingest: corpus produced no chunks".into()));
    }
    info!(documents = docs.len(), chunks = chunks.len(), "chunked corpus");
    rec.write(CHUNKS_FILE, jsonl::to_string(&chunks))?;
    rec.finish()
}

pub fn summarize(cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, Stage::Summarize)?;
    let chunks: Vec<Chunk> = read_jsonl(&rec.require(CHUNKS_FILE, Stage::Ingest)?)?;
    let gw = gateway(cfg, rec.seed)?;
    rec.backend = Some(gw.backend_id());
    let mut summaries: Vec<Summary> = Vec::new();
    for (chunk, result) in chunks.iter().zip(gw.summarize_all(&chunks)) {
        match result {
            Ok(s) => summaries.push(s),
            Err(e @ GenError::SummaryParse { .. }) => rec.warn(format!("skipping chunk {}: {e}", chunk.chunk_id)),
            Err(e) => return Err(gen_error(Stage::Summarize, e)),
        }
    }
    rec.write(SUMMARIES_FILE, jsonl::to_string(&summaries))?;
    rec.finish()
}

pub fn embed(cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, Stage::Embed)?;
    let chunks: Vec<Chunk> = read_jsonl(&rec.require(CHUNKS_FILE, Stage::Ingest)?)?;
    let embedder = Embedder::new(cfg.embedding.clone()).map_err(|e| embed_error(Stage::Embed, e))?;
    rec.backend = Some(cfg.embedding.backend_id());
    let texts: Vec<String> = chunks.iter().map(|c| c.text.clone()).collect();
    let vectors = embedder.embed(&texts).map_err(|e| embed_error(Stage::Embed, e))?;
    let file = VectorsFile {
        schema_version: VECTORS_SCHEMA_VERSION,
        backend_id: cfg.embedding.backend_id(),
        dim: cfg.embedding.dim(),
        chunk_ids: chunks.iter().map(|c| c.chunk_id.clone()).collect(),
        vectors,
    };
    rec.write(VECTORS_FILE, pretty_json(&file))?;
    rec.finish()
}

fn load_vectors(rec: &mut Recorder, cfg: &RunConfig) -> Result<VectorsFile, PipelineError> {
    let file: VectorsFile = read_json(&rec.require(VECTORS_FILE, Stage::Embed)?)?;
    if file.schema_version != VECTORS_SCHEMA_VERSION {
        return Err(PipelineError::Validation(format!("unsupported vectors schema {}", file.schema_version)));
    }
    if file.backend_id != cfg.embedding.backend_id() {
        return Err(PipelineError::Validation(format!(
            "vectors were produced by {} but the config selects {}; re-run embed",
            file.backend_id,
            cfg.embedding.backend_id()
        )));
    }
    Ok(file)
}

pub fn cluster(cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, Stage::Cluster)?;
    let vf = load_vectors(&mut rec, cfg)?;
    let c = &cfg.clustering;
    let model = match c.k {
        Some(k) => kmeans(&vf.vectors, k, rec.seed, c.max_iter, c.tol),
        None => kmeans_auto(&vf.vectors, rec.seed, c.max_iter, c.tol),
    }
    .map_err(|e| PipelineError::Validation(format!("cluster: {e}")))?;
    info!(k = model.k, inertia = model.inertia, "clustered chunks");
    let labels: Vec<String> = model.assignments.iter().map(|a| format!("cluster {a}")).collect();
    rec.write(CLUSTERS_FILE, pretty_json(&ClustersFile { chunk_ids: vf.chunk_ids.clone(), model }))?;

    match tsne(&vf.vectors, &stage_tsne(cfg, rec.seed)) {
        Ok(out) => {
            for (ext, format) in [("csv", ScatterFormat::Csv), ("svg", ScatterFormat::Svg)] {
                let name = format!("{CLUSTER_SCATTER_STEM}.{ext}");
                scatter_export(&out.coords, &labels, &rec.path(&name), format)
                    .map_err(|e| PipelineError::io(&rec.path(&name), e))?;
                rec.produced(&name);
            }
        }
        Err(e) => rec.warn(format!("cluster scatter skipped: {e}")),
    }
    rec.finish()
}

pub fn generate(cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, Stage::Generate)?;
    let chunks: Vec<Chunk> = read_jsonl(&rec.require(CHUNKS_FILE, Stage::Ingest)?)?;
    let summaries: Vec<Summary> = read_jsonl(&rec.require(SUMMARIES_FILE, Stage::Summarize)?)?;
    let by_chunk: HashMap<&str, &Summary> = summaries.iter().map(|s| (s.chunk_id.as_str(), s)).collect();
    let mut work = Vec::new();
    for c in &chunks {
        match by_chunk.get(c.chunk_id.as_str()) {
            Some(s) => work.push((c.clone(), (*s).clone())),
            None => rec.warn(format!("chunk {} has no summary; not generating", c.chunk_id)),
        }
    }
    let gw = gateway(cfg, rec.seed)?;
    rec.backend = Some(gw.backend_id());
    let mut pairs: Vec<QnaPair> = Vec::new();
    for ((chunk, _), result) in work.iter().zip(gw.generate_all(&work, cfg.generation.n_pairs)) {
        match result {
            Ok(ps) => {
                for p in ps {
                    if pairs.iter().any(|q| q.pair_id == p.pair_id) {
                        rec.warn(format!("duplicate pair {} dropped", p.pair_id));
                    } else {
                        pairs.push(p);
                    }
                }
            }
            Err(e @ GenError::QnaGeneration { .. }) => rec.warn(format!("chunk {}: {e}", chunk.chunk_id)),
            Err(e) => return Err(gen_error(Stage::Generate, e)),
        }
    }
    let w = gw.warnings();
    if w.dropped_elements > 0 || w.repair_retries > 0 {
        rec.warn(format!("{} invalid elements dropped, {} repair retries", w.dropped_elements, w.repair_retries));
    }
    info!(pairs = pairs.len(), "generated pairs");
    rec.write(PAIRS_FILE, jsonl::to_string(&pairs))?;
    rec.finish()
}

pub fn evaluate(cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    cfg.validate()?;
    let mut rec = Recorder::new(cfg, Stage::Evaluate)?;
    let vf = load_vectors(&mut rec, cfg)?;
    let pairs: Vec<QnaPair> = read_jsonl(&rec.require(PAIRS_FILE, Stage::Generate)?)?;
    let benchmark = match &cfg.benchmark_path {
        Some(p) => {
            rec.inputs.insert(p.display().to_string(), hash_file(p)?);
            BenchmarkSet::load(p).map_err(eval_error)?
        }
        None => BenchmarkSet::bundled(),
    };
    let generation_backend = Manifest::load_or_new(&cfg.out_dir, &cfg.run_id(), cfg.seed)?
        .stages
        .get(Stage::Generate.name())
        .and_then(|e| e.backend.clone())
        .unwrap_or_else(|| "unknown".into());

    let embedder = Embedder::new(cfg.embedding.clone()).map_err(|e| embed_error(Stage::Evaluate, e))?;
    rec.backend = Some(cfg.embedding.backend_id());
    let questions: Vec<String> = pairs.iter().map(|p| p.question.clone()).collect();
    let qvecs = embedder.embed(&questions).map_err(|e| embed_error(Stage::Evaluate, e))?;
    let question_map: HashMap<String, Vector> =
        pairs.iter().map(|p| p.pair_id.clone()).zip(qvecs.iter().cloned()).collect();
    let chunk_map: HashMap<String, Vector> = vf.chunk_ids.iter().cloned().zip(vf.vectors.iter().cloned()).collect();

    let relevance = relevance_report(&pairs, &chunk_map, &question_map, cfg.threshold).map_err(eval_error)?;
    let entropy = shannon_entropy(&questions).map_err(eval_error)?;
    let diversity =
        diversity_projection(&qvecs, &benchmark, &embedder, &stage_tsne(cfg, rec.seed), &rec.path(DIVERSITY_STEM))
            .map_err(eval_error)?;
    rec.produced(&format!("{DIVERSITY_STEM}.csv"));
    rec.produced(&format!("{DIVERSITY_STEM}.svg"));

    let report = build_report(ReportInputs {
        run_id: cfg.run_id(),
        threshold: cfg.threshold,
        relevance: &relevance,
        entropy,
        projection_ref: Some(format!("{DIVERSITY_STEM}.csv")),
        benchmark_scores: diversity.scores,
        backend_ids: BackendIds { embedding: cfg.embedding.backend_id(), generation: generation_backend },
    })
    .map_err(eval_error)?;

    rec.write(SCORED_PAIRS_FILE, jsonl::to_string(&relevance.pairs))?;
    rec.write(HISTOGRAM_FILE, relevance.histogram.to_csv())?;
    rec.write(REPORT_FILE, report.to_json())?;
    rec.write(REPORT_TEXT_FILE, report.summary())?;
    info!(flagged = report.flagged_count, scored = report.scored_pairs, entropy = report.entropy_bits, "evaluated");
    rec.finish()
}

/// Curated dataset from the scored pairs and the review decision log. A
/// missing log means nothing has been reviewed yet.
pub fn export(cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    let mut rec = Recorder::new(cfg, Stage::Export)?;
    let dataset_path = rec.require(SCORED_PAIRS_FILE, Stage::Evaluate)?;
    let text = std::fs::read_to_string(&dataset_path).map_err(|e| PipelineError::io(&dataset_path, e))?;
    let dataset = parse_dataset(&text).map_err(|e| PipelineError::Validation(format!("export: {e}")))?;
    let log_path = rec.path(DECISIONS_FILE);
    let log = if log_path.is_file() {
        rec.inputs.insert(DECISIONS_FILE.into(), hash_file(&log_path)?);
        let log_text = std::fs::read_to_string(&log_path).map_err(|e| PipelineError::io(&log_path, e))?;
        let known = dataset.iter().map(|p| p.pair_id.as_str()).collect();
        parse_log(&log_text, &known).map_err(|e| PipelineError::Validation(format!("{}: {e}", log_path.display())))?
    } else {
        Vec::new()
    };
    rec.write(CURATED_FILE, export_jsonl(&dataset, &log))?;
    rec.finish()
}

pub fn run_stage(stage: Stage, cfg: &RunConfig) -> Result<StageOutcome, PipelineError> {
    match stage {
        Stage::Ingest => ingest(cfg),
        Stage::Summarize => summarize(cfg),
        Stage::Embed => embed(cfg),
        Stage::Cluster => cluster(cfg),
        Stage::Generate => generate(cfg),
        Stage::Evaluate => evaluate(cfg),
        Stage::Export => export(cfg),
    }
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<StageOutcome>, PipelineError> {
    cfg.validate()?;
    Stage::ALL.iter().map(|&s| run_stage(s, cfg)).collect()
}

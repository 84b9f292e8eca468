//! Run configuration: one JSON document covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use synthqa_core::clustering::{DEFAULT_MAX_ITER, DEFAULT_TOL};
use synthqa_core::embedding::{EmbedBackendConfig, EmbedBackendKind};
use synthqa_core::evaluation::DEFAULT_THRESHOLD;
use synthqa_core::ingest::{ChunkingConfig, DocumentFormat};
use synthqa_core::llm::{GenBackendConfig, GenBackendKind};
use synthqa_core::projection::TsneConfig;
use synthqa_core::text::fnv1a64;

use crate::error::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInput {
    pub path: PathBuf,
    /// Inferred from the extension when absent.
    #[serde(default)]
    pub format: Option<DocumentFormat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterSettings {
    /// Fixed cluster count; `None` picks k by silhouette.
    pub k: Option<usize>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ClusterSettings {
    fn default() -> Self {
        Self { k: None, max_iter: DEFAULT_MAX_ITER, tol: DEFAULT_TOL }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Empty means the bundled sample corpus.
    pub corpus: Vec<CorpusInput>,
    pub chunking: ChunkingConfig,
    pub generation: GenBackendConfig,
    pub embedding: EmbedBackendConfig,
    pub clustering: ClusterSettings,
    pub tsne: TsneConfig,
    pub threshold: f64,
    /// Bundled benchmark questions when absent.
    pub benchmark_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: Vec::new(),
            chunking: ChunkingConfig::default(),
            generation: GenBackendConfig::default(),
            embedding: EmbedBackendConfig::default(),
            clustering: ClusterSettings::default(),
            tsne: TsneConfig::default(),
            threshold: DEFAULT_THRESHOLD,
            benchmark_path: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendMode {
    Remote,
    Mock,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| PipelineError::Validation(format!("config {}: {e}", path.display())))?;
        // Relative corpus and benchmark paths are taken relative to the config file.
        let base = path.parent().unwrap_or(Path::new(""));
        for input in &mut cfg.corpus {
            if input.path.is_relative() {
                input.path = base.join(&input.path);
            }
        }
        if let Some(b) = &mut cfg.benchmark_path {
            if b.is_relative() {
                *b = base.join(&*b);
            }
        }
        Ok(cfg)
    }

    /// Select both backends at once. Mock means the fixture chat backend and
    /// the local hashing embedder, so no request leaves the process.
    pub fn set_backend(&mut self, mode: BackendMode) {
        match mode {
            BackendMode::Mock => {
                self.generation.kind = GenBackendKind::Mock;
                self.embedding.kind = EmbedBackendKind::LocalDeterministic;
            }
            BackendMode::Remote => {
                self.generation.kind = GenBackendKind::Remote;
                self.embedding.kind = EmbedBackendKind::Remote;
            }
        }
    }

    pub fn is_offline(&self) -> bool {
        self.generation.kind == GenBackendKind::Mock && self.embedding.kind == EmbedBackendKind::LocalDeterministic
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let v = |e: String| PipelineError::Validation(e);
        self.chunking.validate().map_err(|e| v(e.to_string()))?;
        self.generation.validate().map_err(|e| v(e.to_string()))?;
        self.embedding.validate().map_err(|e| v(e.to_string()))?;
        self.tsne.validate().map_err(|e| v(e.to_string()))?;
        if !(self.threshold.is_finite() && (-1.0..=1.0).contains(&self.threshold)) {
            return Err(v(format!("threshold {} outside [-1, 1]", self.threshold)));
        }
        if self.clustering.k == Some(0) {
            return Err(v("clustering.k must be positive".into()));
        }
        if self.clustering.max_iter == 0 || !(self.clustering.tol >= 0.0) {
            return Err(v("clustering.max_iter must be positive and tol non-negative".into()));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(v("out_dir must be set".into()));
        }
        Ok(())
    }

    /// Hash of everything that affects outputs. The output directory is
    /// excluded so identical runs in different places agree.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Deterministic id for a run of this config.
    pub fn run_id(&self) -> String {
        format!("run-{}", &self.config_hash()[..16])
    }
}

/// Per-stage seed derived from the global one by stable hashing, so each
/// stage reproduces on its own.
pub fn stage_seed(stage: &str, global: u64) -> u64 {
    let mut bytes = stage.as_bytes().to_vec();
    bytes.extend_from_slice(&global.to_le_bytes());
    fnv1a64(&bytes)
}

//! Text embeddings: a remote OpenAI-compatible backend, a deterministic
//! signed-hash bag-of-words backend, and a content-addressed cache.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::http::{api_key_from_env, HttpError, JsonClient, RetryPolicy};
use crate::text::{fnv1a64, tokenize};

/// Default dimension of the remote embedding model.
pub const REMOTE_DEFAULT_DIM: usize = 1536;
pub const LOCAL_DEFAULT_DIM: usize = 256;
/// Maximum number of texts sent in one remote embeddings request.
pub const REMOTE_BATCH_SIZE: usize = 64;

const CACHE_MAGIC: &str = "SYNTHQA-EMBED-CACHE v1";
const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("text at index {0} is empty")]
    EmptyText(usize),
    #[error("text has no alphanumeric tokens: {0:?}")]
    NoTokens(String),
    #[error("hashed token counts cancel to the zero vector for {0:?}")]
    ZeroVector(String),
    #[error("invalid vector: {0}")]
    InvalidVector(String),
    #[error("invalid embedding config: {0}")]
    Config(String),
    #[error("embedding backend: {0}")]
    Backend(#[from] HttpError),
    #[error("malformed embeddings response: {0}")]
    Response(String),
    #[error("cache I/O on {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A fixed-dimension embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    pub dim: usize,
    pub values: Vec<f64>,
    pub normalized: bool,
}

impl Vector {
    /// Wrap raw values; rejects empty or non-finite input.
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::InvalidVector("vector has no components".into()));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::InvalidVector(format!("component {i} is not finite")));
        }
        let normalized = (norm(&values) - 1.0).abs() <= NORM_TOLERANCE;
        Ok(Self { dim: values.len(), values, normalized })
    }

    /// Scale to unit Euclidean norm.
    pub fn unit(mut values: Vec<f64>) -> Result<Self, EmbedError> {
        let n = norm(&values);
        if n == 0.0 || !n.is_finite() {
            return Err(EmbedError::InvalidVector("cannot normalize a zero or non-finite vector".into()));
        }
        for v in &mut values {
            *v /= n;
        }
        let mut out = Self::new(values)?;
        out.normalized = true;
        Ok(out)
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

fn norm(values: &[f64]) -> f64 {
    values.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedBackendKind {
    Remote,
    LocalDeterministic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedBackendConfig {
    pub kind: EmbedBackendKind,
    /// Full URL of the embeddings endpoint (remote only).
    pub endpoint_url: String,
    pub model_name: String,
    pub api_key_env: String,
    /// Output dimension; defaults to 1536 for remote and 256 for local.
    pub dim: Option<usize>,
    pub cache_path: Option<PathBuf>,
    pub max_retries: u32,
    pub timeout_seconds: f64,
    pub retry_backoff_ms: u64,
}

impl Default for EmbedBackendConfig {
    fn default() -> Self {
        Self {
            kind: EmbedBackendKind::LocalDeterministic,
            endpoint_url: String::new(),
            model_name: "text-embedding-ada-002".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            dim: None,
            cache_path: None,
            max_retries: 2,
            timeout_seconds: 60.0,
            retry_backoff_ms: 500,
        }
    }
}

impl EmbedBackendConfig {
    pub fn local(dim: usize) -> Self {
        Self { dim: Some(dim), ..Self::default() }
    }

    pub fn dim(&self) -> usize {
        self.dim.unwrap_or(match self.kind {
            EmbedBackendKind::Remote => REMOTE_DEFAULT_DIM,
            EmbedBackendKind::LocalDeterministic => LOCAL_DEFAULT_DIM,
        })
    }

    /// Identifier recorded in reports and cache keys.
    pub fn backend_id(&self) -> String {
        match self.kind {
            EmbedBackendKind::Remote => format!("remote:{}:{}", self.model_name, self.dim()),
            EmbedBackendKind::LocalDeterministic => format!("local-fnv1a-bow:{}", self.dim()),
        }
    }

    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim() < 2 {
            return Err(EmbedError::Config("dim must be at least 2".into()));
        }
        if self.kind == EmbedBackendKind::Remote
            && (self.endpoint_url.is_empty() || self.api_key_env.is_empty())
        {
            return Err(EmbedError::Config(
                "remote backend requires endpoint_url and api_key_env".into(),
            ));
        }
        Ok(())
    }
}

/// Signed feature hashing over lowercase alphanumeric tokens.
///
/// Each token's FNV-1a 64 hash picks the bucket (`hash % dim`) and the sign
/// (bit 63 set means -1). Counts are accumulated and L2-normalized.
pub fn local_deterministic_embed(text: &str, dim: usize) -> Result<Vector, EmbedError> {
    if dim < 2 {
        return Err(EmbedError::Config("dim must be at least 2".into()));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(EmbedError::NoTokens(text.to_string()));
    }
    let mut values = vec![0.0; dim];
    for token in &tokens {
        let h = fnv1a64(token.as_bytes());
        let idx = (h % dim as u64) as usize;
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        values[idx] += sign;
    }
    Vector::unit(values).map_err(|_| EmbedError::ZeroVector(text.to_string()))
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    dim: usize,
    values: Vec<f64>,
}

/// Append-only embedding cache.
///
/// On disk: a magic header line followed by one JSON record per line
/// (`{"key", "dim", "values"}`). A file with a bad header or any unreadable
/// record is discarded and rebuilt.
pub struct EmbeddingCache {
    entries: RwLock<HashMap<String, Vector>>,
    writer: Option<Mutex<File>>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self { entries: RwLock::new(HashMap::new()), writer: None, path: None }
    }

    pub fn open(path: &Path) -> Result<Self, EmbedError> {
        let io = |source| EmbedError::CacheIo { path: path.display().to_string(), source };
        let mut entries = HashMap::new();
        let mut rebuild = false;
        if path.exists() {
            match read_cache(path) {
                Ok(map) => entries = map,
                Err(reason) => {
                    warn!(path = %path.display(), %reason, "embedding cache corrupt; rebuilding");
                    rebuild = true;
                }
            }
        } else {
            rebuild = true;
        }
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        if rebuild {
            let mut f = File::create(path).map_err(io)?;
            writeln!(f, "{CACHE_MAGIC}").map_err(io)?;
            f.sync_all().map_err(io)?;
        }
        let file = OpenOptions::new().append(true).open(path).map_err(io)?;
        Ok(Self {
            entries: RwLock::new(entries),
            writer: Some(Mutex::new(file)),
            path: Some(path.to_path_buf()),
        })
    }

    pub fn get(&self, key: &str) -> Option<Vector> {
        self.entries.read().expect("cache lock poisoned").get(key).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert(&self, key: String, vector: Vector) -> Result<(), EmbedError> {
        if let Some(writer) = &self.writer {
            let record = CacheRecord { key: key.clone(), dim: vector.dim, values: vector.values.clone() };
            let mut line = serde_json::to_string(&record).expect("cache record serializes");
            line.push('\n');
            let mut f = writer.lock().expect("cache writer poisoned");
            f.write_all(line.as_bytes()).map_err(|source| EmbedError::CacheIo {
                path: self.path.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
                source,
            })?;
        }
        self.entries.write().expect("cache lock poisoned").insert(key, vector);
        Ok(())
    }
}

fn read_cache(path: &Path) -> Result<HashMap<String, Vector>, String> {
    let f = File::open(path).map_err(|e| e.to_string())?;
    let mut lines = BufReader::new(f).lines();
    match lines.next() {
        Some(Ok(h)) if h == CACHE_MAGIC => {}
        _ => return Err("missing or unknown header".into()),
    }
    let mut map = HashMap::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| e.to_string())?;
        let rec: CacheRecord =
            serde_json::from_str(&line).map_err(|e| format!("record {}: {e}", i + 1))?;
        if rec.values.len() != rec.dim {
            return Err(format!("record {}: dim mismatch", i + 1));
        }
        let v = Vector::new(rec.values).map_err(|e| format!("record {}: {e}", i + 1))?;
        map.insert(rec.key, v);
    }
    Ok(map)
}

/// Cache key: backend id, model and SHA-256 of the text.
pub fn cache_key(cfg: &EmbedBackendConfig, text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    format!("{}|{}|{}", cfg.backend_id(), cfg.model_name, hex::encode(digest))
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct EmbedStats {
    pub cache_hits: usize,
    pub computed: usize,
    pub remote_batches: usize,
}

/// Embedding backend plus cache.
pub struct Embedder {
    cfg: EmbedBackendConfig,
    cache: EmbeddingCache,
    client: Option<JsonClient>,
    stats: Mutex<EmbedStats>,
}

impl Embedder {
    /// Build from config, opening the on-disk cache when `cache_path` is set.
    pub fn new(cfg: EmbedBackendConfig) -> Result<Self, EmbedError> {
        let cache = match &cfg.cache_path {
            Some(p) => EmbeddingCache::open(p)?,
            None => EmbeddingCache::in_memory(),
        };
        Self::with_cache(cfg, cache)
    }

    pub fn with_cache(cfg: EmbedBackendConfig, cache: EmbeddingCache) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let client = match cfg.kind {
            EmbedBackendKind::Remote => {
                let key = api_key_from_env(&cfg.api_key_env)?;
                Some(JsonClient::new(
                    key,
                    Duration::from_secs_f64(cfg.timeout_seconds),
                    RetryPolicy {
                        max_retries: cfg.max_retries,
                        backoff: Duration::from_millis(cfg.retry_backoff_ms),
                    },
                )?)
            }
            EmbedBackendKind::LocalDeterministic => None,
        };
        Ok(Self { cfg, cache, client, stats: Mutex::new(EmbedStats::default()) })
    }

    pub fn config(&self) -> &EmbedBackendConfig {
        &self.cfg
    }

    pub fn stats(&self) -> EmbedStats {
        *self.stats.lock().expect("stats lock poisoned")
    }

    /// Embed every text in order. Each result is unit-norm.
    pub fn embed(&self, texts: &[String]) -> Result<Vec<Vector>, EmbedError> {
        if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText(i));
        }
        let keys: Vec<String> = texts.iter().map(|t| cache_key(&self.cfg, t)).collect();
        let mut out: Vec<Option<Vector>> = keys.iter().map(|k| self.cache.get(k)).collect();
        let hits = out.iter().filter(|v| v.is_some()).count();

        // Unique misses in first-seen order so cache appends are deterministic.
        let mut miss_order: Vec<usize> = Vec::new();
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, slot) in out.iter().enumerate() {
            if slot.is_none() && !seen.contains_key(keys[i].as_str()) {
                seen.insert(keys[i].as_str(), i);
                miss_order.push(i);
            }
        }

        let mut batches = 0;
        let computed: Vec<Vector> = match self.cfg.kind {
            EmbedBackendKind::LocalDeterministic => miss_order
                .iter()
                .map(|&i| local_deterministic_embed(&texts[i], self.cfg.dim()))
                .collect::<Result<_, _>>()?,
            EmbedBackendKind::Remote => {
                let mut vecs = Vec::with_capacity(miss_order.len());
                for batch in miss_order.chunks(REMOTE_BATCH_SIZE) {
                    let inputs: Vec<&str> = batch.iter().map(|&i| texts[i].as_str()).collect();
                    vecs.extend(self.remote_batch(&inputs)?);
                    batches += 1;
                }
                vecs
            }
        };

        for (&i, v) in miss_order.iter().zip(computed) {
            self.cache.insert(keys[i].clone(), v.clone())?;
            out[i] = Some(v);
        }
        for i in 0..out.len() {
            if out[i].is_none() {
                let first = seen[keys[i].as_str()];
                out[i] = out[first].clone();
            }
        }

        let mut stats = self.stats.lock().expect("stats lock poisoned");
        stats.cache_hits += hits;
        stats.computed += miss_order.len();
        stats.remote_batches += batches;
        Ok(out.into_iter().map(|v| v.expect("every slot filled")).collect())
    }

    fn remote_batch(&self, inputs: &[&str]) -> Result<Vec<Vector>, EmbedError> {
        let client = self.client.as_ref().expect("remote backend has a client");
        let body = json!({ "model": self.cfg.model_name, "input": inputs });
        let resp = client.post(&self.cfg.endpoint_url, &body)?;
        let data = resp
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| EmbedError::Response("missing data array".into()))?;
        if data.len() != inputs.len() {
            return Err(EmbedError::Response(format!(
                "expected {} embeddings, got {}",
                inputs.len(),
                data.len()
            )));
        }
        let mut indexed: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(|i| i.as_u64()).map_or(pos, |i| i as usize);
            let values: Vec<f64> = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| EmbedError::Response(format!("item {pos} has no embedding")))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| EmbedError::Response("non-numeric component".into())))
                .collect::<Result<_, _>>()?;
            if values.len() != self.cfg.dim() {
                return Err(EmbedError::Response(format!(
                    "expected dimension {}, got {}",
                    self.cfg.dim(),
                    values.len()
                )));
            }
            indexed.push((index, values));
        }
        indexed.sort_by_key(|(i, _)| *i);
        indexed.into_iter().map(|(_, v)| Vector::unit(v)).collect()
    }
}

/// One-shot convenience over [`Embedder`].
pub fn embed_texts(texts: &[String], cfg: &EmbedBackendConfig) -> Result<Vec<Vector>, EmbedError> {
    Embedder::new(cfg.clone())?.embed(texts)
}

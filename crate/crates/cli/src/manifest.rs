//! `manifest.json`: one entry per stage with the hashes needed to re-run it.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::PipelineError;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub seed: u64,
    pub config_hash: String,
    /// Input name to sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the run directory) to sha256.
    pub outputs: BTreeMap<String, String>,
    pub timestamp: String,
    /// Backend that produced the outputs, when the stage calls one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub run_id: String,
    pub global_seed: u64,
    pub stages: BTreeMap<String, StageEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn hash_file(path: &Path) -> Result<String, PipelineError> {
    std::fs::read(path).map(|b| sha256_hex(&b)).map_err(|e| PipelineError::io(path, e))
}

/// Stage timestamp. `SOURCE_DATE_EPOCH` wins; offline runs otherwise use the
/// epoch so their manifests are reproducible.
pub fn stage_timestamp(offline: bool) -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse::<i64>().ok());
    let t = match (fixed, offline) {
        (Some(secs), _) => DateTime::<Utc>::from_timestamp(secs, 0).unwrap_or_default(),
        (None, true) => DateTime::<Utc>::UNIX_EPOCH,
        (None, false) => Utc::now(),
    };
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

impl Manifest {
    pub fn load_or_new(dir: &Path, run_id: &str, global_seed: u64) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => {
                let mut m: Manifest = serde_json::from_str(&text).map_err(|e| PipelineError::io(&path, e))?;
                if m.run_id != run_id || m.global_seed != global_seed {
                    // A different config owns this directory now; earlier entries are stale.
                    m = Self::empty(run_id, global_seed);
                }
                Ok(m)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::empty(run_id, global_seed)),
            Err(e) => Err(PipelineError::io(&path, e)),
        }
    }

    fn empty(run_id: &str, global_seed: u64) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            run_id: run_id.to_string(),
            global_seed,
            stages: BTreeMap::new(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))
    }

    /// Re-hash every recorded output and list the ones that no longer match.
    pub fn verify(&self, dir: &Path) -> Vec<String> {
        let mut bad = Vec::new();
        for (stage, entry) in &self.stages {
            for (name, hash) in &entry.outputs {
                if hash_file(&dir.join(name)).ok().as_deref() != Some(hash.as_str()) {
                    bad.push(format!("{stage}:{name}"));
                }
            }
        }
        bad
    }
}

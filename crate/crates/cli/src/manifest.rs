//! `manifest.json`: what each stage wrote, with content hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub error: Option<String>,
    pub wall_clock_s: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub stage: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64) -> Self {
        let versions = BTreeMap::from([
            ("dreamlab-core".to_string(), dreamlab::VERSION.to_string()),
            ("dreamlab-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]);
        Self {
            config_hash,
            seed,
            versions,
            stages: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// The manifest in `out`, if it belongs to the same config; a fresh one
    /// otherwise.
    pub fn load_or_new(out: &Path, config_hash: &str, seed: u64) -> Self {
        std::fs::read_to_string(out.join(MANIFEST_FILE))
            .ok()
            .and_then(|text| serde_json::from_str::<Self>(&text).ok())
            .filter(|m| m.config_hash == config_hash)
            .unwrap_or_else(|| Self::new(config_hash.to_string(), seed))
    }

    /// Replaces everything previously recorded for `stage`.
    pub fn record(&mut self, stage: StageRecord, artifacts: Vec<Artifact>) {
        self.artifacts.retain(|a| a.stage != stage.name);
        self.artifacts.extend(artifacts);
        self.artifacts.sort_by(|a, b| a.path.cmp(&b.path));
        self.stages.retain(|s| s.name != stage.name);
        self.stages.push(stage);
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        let path = out.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(CliError::json(&path))?;
        std::fs::write(&path, text).map_err(CliError::io(path))
    }

    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

/// Collects the files one stage writes and hashes them as they go out.
#[derive(Debug)]
pub struct ArtifactWriter {
    out: PathBuf,
    stage: String,
    written: Vec<Artifact>,
}

impl ArtifactWriter {
    pub fn new(out: &Path, stage: &str) -> Self {
        Self {
            out: out.to_path_buf(),
            stage: stage.to_string(),
            written: Vec::new(),
        }
    }

    pub fn write(&mut self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let bytes = bytes.as_ref();
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        }
        std::fs::write(&path, bytes).map_err(CliError::io(&path))?;
        self.written.push(Artifact {
            path: rel.to_string(),
            stage: self.stage.clone(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).map_err(CliError::json(self.out.join(rel)))?;
        self.write(rel, text + "\n")
    }

    pub fn write_jsonl<T: Serialize>(&mut self, rel: &str, rows: &[T]) -> Result<PathBuf> {
        let mut text = String::new();
        for row in rows {
            text += &serde_json::to_string(row).map_err(CliError::json(self.out.join(rel)))?;
            text.push('\n');
        }
        self.write(rel, text)
    }

    pub fn into_artifacts(self) -> Vec<Artifact> {
        self.written
    }
}

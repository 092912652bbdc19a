//! `manifest.json`: which artifacts exist in a run directory, their hashes,
//! and the config they came from.

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::Failure;

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    /// Relative to the run directory.
    pub path: PathBuf,
    pub sha256: String,
    pub stage: String,
    pub created: u64,
    /// Replaced by a forced re-run; the file is kept.
    #[serde(default)]
    pub superseded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub tool_version: String,
    pub seeds: Vec<u64>,
    pub created: u64,
    pub updated: u64,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

pub fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_text(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

impl RunManifest {
    pub fn new(config_hash: String, seeds: Vec<u64>) -> Self {
        let t = now();
        RunManifest {
            config_hash,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            created: t,
            updated: t,
            artifacts: BTreeMap::new(),
        }
    }

    /// Load the manifest of `dir`, or start one. A manifest written under a
    /// different config is refused.
    pub fn open(dir: &Path, config_hash: &str, seeds: &[u64]) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        if !path.exists() {
            return Ok(RunManifest::new(config_hash.to_string(), seeds.to_vec()));
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let m: RunManifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if m.config_hash != config_hash {
            return Err(Failure::Dependency(format!(
                "{} was produced by a different config (hash {}); use a fresh output directory",
                path.display(),
                m.config_hash
            ))
            .into());
        }
        Ok(m)
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        self.updated = now();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join(FILE_NAME), text + "\n")?;
        Ok(())
    }

    pub fn has(&self, key: &str) -> bool {
        self.artifacts.contains_key(key)
    }

    /// Check that `key` is recorded and its file still matches the recorded hash.
    pub fn verify(&self, dir: &Path, key: &str, needed_by: &str, produced_by: &str) -> Result<PathBuf> {
        let entry = self.artifacts.get(key).ok_or_else(|| {
            Failure::Dependency(format!("{needed_by} needs `{key}`; run `{produced_by}` first"))
        })?;
        let path = dir.join(&entry.path);
        if !path.exists() {
            return Err(Failure::Dependency(format!("`{key}` is recorded but {} is missing", path.display())).into());
        }
        let actual = sha256_file(&path)?;
        if actual != entry.sha256 {
            return Err(Failure::Dependency(format!(
                "hash mismatch for {}: manifest has {}, file has {actual}",
                path.display(),
                entry.sha256
            ))
            .into());
        }
        Ok(path)
    }

    /// Record a freshly written file under `key`.
    pub fn record(&mut self, dir: &Path, key: &str, rel: &Path, stage: &str) -> Result<()> {
        let sha256 = sha256_file(&dir.join(rel))?;
        self.artifacts.insert(
            key.to_string(),
            ArtifactEntry { path: rel.to_path_buf(), sha256, stage: stage.to_string(), created: now(), superseded: false },
        );
        Ok(())
    }

    /// Move the file behind `key` aside (`name.N.ext`) and keep its entry as superseded.
    pub fn retire(&mut self, dir: &Path, key: &str) -> Result<()> {
        let Some(mut entry) = self.artifacts.remove(key) else {
            return Ok(());
        };
        let old = dir.join(&entry.path);
        let stem = entry.path.file_stem().and_then(|s| s.to_str()).unwrap_or("artifact").to_string();
        let ext = entry.path.extension().and_then(|s| s.to_str()).map(|e| format!(".{e}")).unwrap_or_default();
        let parent = entry.path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut n = 1;
        let rel = loop {
            let candidate = parent.join(format!("{stem}.{n}{ext}"));
            if !dir.join(&candidate).exists() {
                break candidate;
            }
            n += 1;
        };
        if old.exists() {
            std::fs::rename(&old, dir.join(&rel))?;
        }
        entry.path = rel;
        entry.superseded = true;
        self.artifacts.insert(format!("{key}@{n}"), entry);
        Ok(())
    }
}

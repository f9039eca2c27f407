//! Run manifests: per-command JSON records of config hash, seeds, artifact
//! paths with content checksums, and metric summaries. Output files are
//! written atomically (temp + rename).

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub global_seed: u64,
    /// Named sub-seeds actually used by the stage, for the log.
    pub stage_seeds: Vec<(String, u64)>,
    pub artifacts: Vec<ArtifactRecord>,
    /// Flat key -> value summary (metric means, counts, statuses).
    pub summary: Vec<(String, String)>,
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str, global_seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            global_seed,
            stage_seeds: Vec::new(),
            artifacts: Vec::new(),
            summary: Vec::new(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.stage_seeds.push((name.to_string(), seed));
    }

    pub fn summarize(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    /// Record an artifact with its content checksum.
    pub fn artifact(&mut self, path: &Path) -> Result<()> {
        self.artifacts.push(ArtifactRecord {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest serialization: {e}")))?;
        write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Temp path next to the target so the final rename stays on one filesystem.
pub fn temp_sibling(path: &Path) -> PathBuf {
    let mut name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    name.push_str(".tmp");
    path.with_file_name(name)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = temp_sibling(path);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let artifact = dir.path().join("data.bin");
        std::fs::write(&artifact, b"payload").unwrap();
        let mut m = RunManifest::new("phantom-gen", "abc123", 7);
        m.seed("phantom", 99);
        m.artifact(&artifact).unwrap();
        m.summarize("n", 1);
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = RunManifest::load(&path).unwrap();
        assert_eq!(loaded.command, "phantom-gen");
        assert_eq!(loaded.artifacts.len(), 1);
        assert_eq!(loaded.artifacts[0].sha256, sha256_hex(b"payload"));
    }
}

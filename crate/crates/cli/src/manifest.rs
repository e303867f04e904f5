//! Run manifests: what was run, with which config, and the hash of every output.

use jslds_core::train::{sha256_hex, TrainConfig};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Arguments that regenerate the artifacts, minus `--out`.
    pub argv: Vec<String>,
    pub config: Option<TrainConfig>,
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub artifacts: Vec<Artifact>,
    pub wallclock_ms: u64,
    pub metrics: serde_json::Value,
}

/// Collects the files a command writes so the manifest can hash them.
#[derive(Debug)]
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(OutDir { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> std::io::Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&p, contents)?;
        if !self.written.iter().any(|w| w == rel) {
            self.written.push(rel.to_string());
        }
        Ok(p)
    }

    /// Hashes everything written so far and saves the manifest next to it.
    pub fn finish(self, mut manifest: RunManifest) -> std::io::Result<RunManifest> {
        manifest.artifacts = self
            .written
            .iter()
            .map(|rel| {
                let bytes = fs::read(self.root.join(rel))?;
                Ok(Artifact { path: rel.clone(), sha256: sha256_hex(&bytes), bytes: bytes.len() as u64 })
            })
            .collect::<std::io::Result<_>>()?;
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(self.root.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv,
            config: None,
            config_hash: None,
            seeds: Vec::new(),
            artifacts: Vec::new(),
            wallclock_ms: 0,
            metrics: serde_json::Value::Null,
        }
    }

    pub fn with_config(mut self, config: &TrainConfig) -> Self {
        self.config_hash = Some(config.hash());
        self.config = Some(config.clone());
        self
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("cannot read manifest {}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("unreadable manifest {}: {e}", path.display()))
    }
}

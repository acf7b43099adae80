//! Run manifest: inputs hashed, outputs listed, written atomically at the
//! end of every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub input_hashes: BTreeMap<String, String>,
    pub output_paths: Vec<String>,
    /// Command-specific records (resolved config, derived seeds, ...).
    pub details: BTreeMap<String, serde_json::Value>,
    pub wall_ms: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config_path: Option<&Path>) -> Self {
        RunManifest {
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            seed,
            input_hashes: BTreeMap::new(),
            output_paths: Vec::new(),
            details: BTreeMap::new(),
            wall_ms: 0,
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.input_hashes
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) {
        self.output_paths.push(path.display().to_string());
    }

    /// Atomic write: temp file in the same directory, then rename.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let target = dir.join("manifest.json");
        let tmp = dir.join("manifest.json.tmp");
        std::fs::write(&tmp, serde_json::to_vec_pretty(self)?)?;
        std::fs::rename(&tmp, &target)?;
        Ok(target)
    }
}

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// What produced an artifact directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub seed: u64,
    pub started_at: String,
    pub code_version: String,
    /// SHA-256 of the running executable.
    pub code_hash: String,
    /// SHA-256 of the input dataset's `manifest.json`.
    pub dataset_hash: Option<String>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl RunManifest {
    pub fn new(command: &str, config: &RunConfig, data: Option<&Path>) -> Result<Self> {
        let exe = std::env::current_exe().context("locating the executable")?;
        Ok(RunManifest {
            command: command.to_string(),
            args: std::env::args().skip(1).collect(),
            config: config.clone(),
            seed: config.seed,
            started_at: chrono::Utc::now().to_rfc3339(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            code_hash: sha256_file(&exe)?,
            dataset_hash: data.map(|d| sha256_file(&d.join("manifest.json"))).transpose()?,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

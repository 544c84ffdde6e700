//! `manifest.json`: what a run consumed and produced.

use std::path::{Path, PathBuf};

use actembed::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AtPath, CliResult};

pub const FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub inputs: Vec<InputDigest>,
    /// Paths relative to the run directory.
    pub artifacts: Vec<String>,
    pub stage2_requested: bool,
    pub stage1_complete: bool,
    pub stage2_complete: bool,
    /// Seconds since the Unix epoch when training started.
    pub started_unix: u64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = std::fs::read(path).at(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn digest_inputs(paths: &[PathBuf]) -> CliResult<Vec<InputDigest>> {
    paths
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.clone(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

impl RunManifest {
    pub fn add_artifact(&mut self, name: &str) {
        if !self.artifacts.iter().any(|a| a == name) {
            self.artifacts.push(name.to_string());
        }
    }

    pub fn save(&self, run: &Path) -> CliResult {
        let path = run.join(FILE);
        crate::write_atomic(&path, crate::pretty_json(self).as_bytes())
    }

    pub fn load(run: &Path) -> CliResult<Self> {
        let path = run.join(FILE);
        let text = std::fs::read_to_string(&path).at(&path)?;
        serde_json::from_str(&text).map_err(|e| crate::error::CliError::data(format!("{}: {e}", path.display())))
    }
}

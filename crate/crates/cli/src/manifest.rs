use std::fs;
use std::path::{Path, PathBuf};

use cad_core::data::{load_manifest, MANIFEST_FILE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Diverged,
    Failed,
}

/// Written next to a training run's outputs; together with the dataset it
/// pins down the run exactly.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub seed: u64,
    pub config: RunConfig,
    pub dataset: PathBuf,
    pub dataset_sha256: String,
    pub checkpoint: Option<PathBuf>,
    pub history: PathBuf,
    pub metrics: Option<PathBuf>,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).map_err(|e| CliError::Data(e.to_string()))?;
        fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
    }
}

/// SHA-256 over the dataset manifest followed by every recording file in
/// manifest order.
pub fn dataset_hash(dir: &Path) -> Result<String, CliError> {
    let manifest = load_manifest(dir)?;
    let mut hasher = Sha256::new();
    let mut feed = |path: PathBuf| -> Result<(), CliError> {
        let bytes = fs::read(&path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
        Ok(())
    };
    feed(dir.join(MANIFEST_FILE))?;
    for entry in &manifest.files {
        feed(dir.join(&entry.file))?;
    }
    Ok(hex::encode(hasher.finalize()))
}

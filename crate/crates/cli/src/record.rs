//! Provenance record dropped into every output directory.

use attnguide_core::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    /// Input artifacts by role: manifest, weights, and the like.
    pub inputs: BTreeMap<String, String>,
    pub created_unix: u64,
}

impl RunRecord {
    pub fn new(command: &str, run_id: &str, config_hash: &str) -> Self {
        // honor SOURCE_DATE_EPOCH so hermetic runs can be byte-compared
        let created_unix = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or_else(|| {
                std::time::SystemTime::now()
                    .duration_since(std::time::UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0)
            });
        RunRecord {
            run_id: run_id.to_string(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            inputs: BTreeMap::new(),
            created_unix,
        }
    }

    pub fn with_input(mut self, role: &str, value: impl AsRef<Path>) -> Self {
        self.inputs.insert(role.to_string(), value.as_ref().display().to_string());
        self
    }
}

pub fn write_run_record(dir: &Path, record: RunRecord) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("run_record.json");
    std::fs::write(&path, serde_json::to_string_pretty(&record)?)?;
    Ok(path)
}

//! Run manifests written next to every artifact.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mult::MultiplierSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub multiplier: String,
    pub multiplier_checksum: Option<String>,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn new(
        command: &str,
        config_hash: &str,
        seed: u64,
        multiplier: Option<&MultiplierSpec>,
        started_unix: u64,
    ) -> Self {
        RunManifest {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            multiplier: multiplier.map_or_else(|| "fp32".to_string(), |m| m.name().to_string()),
            multiplier_checksum: multiplier.map(MultiplierSpec::checksum),
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix,
            finished_unix: unix_now(),
        }
    }

    /// Path of the manifest belonging to `artifact`.
    pub fn path_for(artifact: &Path) -> PathBuf {
        let mut name = artifact.file_name().unwrap_or_default().to_os_string();
        name.push(".manifest.json");
        artifact.with_file_name(name)
    }

    /// Writes the manifest beside `artifact` and returns its path.
    pub fn write_for(&self, artifact: &Path) -> Result<PathBuf> {
        let path = Self::path_for(artifact);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

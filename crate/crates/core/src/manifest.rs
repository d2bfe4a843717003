//! Run manifests: what produced a set of output files.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::sha256_hex;
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::sampler::CallCounts;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_name: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    /// Hex sha256 of each checkpoint used, by model id.
    pub checkpoints: BTreeMap<String, String>,
    pub metrics: BTreeMap<String, MetricsReport>,
    pub call_counts: BTreeMap<String, CallCounts>,
    /// Named scalar results such as held-out training loss.
    pub scalars: BTreeMap<String, f64>,
    pub wall_time_secs: f64,
    /// Hex sha256 of each output file, by path relative to the manifest.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config_name: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            command: command.into(),
            config_name: config_name.into(),
            config_hash: config_hash.into(),
            code_version: env!("CARGO_PKG_VERSION").into(),
            seed,
            ..Self::default()
        }
    }

    /// Records the hash of an output file written under `dir`.
    pub fn record_output(&mut self, dir: &Path, relative: &str) -> Result<()> {
        let path = dir.join(relative);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.outputs.insert(relative.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn check_config(&self, config_hash: &str) -> Result<()> {
        if self.config_hash == config_hash {
            Ok(())
        } else {
            Err(Error::ManifestMismatch(format!(
                "outputs were produced by config {} but the given config hashes to {config_hash}",
                self.config_hash
            )))
        }
    }

    /// Re-hashes every recorded output and reports the first that changed.
    pub fn verify_outputs(&self, dir: &Path) -> Result<()> {
        for (rel, want) in &self.outputs {
            let path = dir.join(rel);
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if &sha256_hex(&bytes) != want {
                return Err(Error::ManifestMismatch(format!("{rel} changed since it was recorded")));
            }
        }
        Ok(())
    }
}

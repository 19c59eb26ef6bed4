//! Per-run provenance written next to every command's outputs.

use std::path::{Path, PathBuf};
use std::time::Instant;

use kdlm_core::model::checkpoint::write_atomic;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::Resolved;
use crate::VERSION;

pub const MANIFEST_FILE: &str = "_manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Running,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub status: Status,
    /// Hash of everything this run's outputs depend on.
    pub fingerprint: String,
    pub config_path: Option<PathBuf>,
    pub config: Value,
    pub config_sha256: String,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub version: String,
    pub duration_secs: f64,
}

impl RunManifest {
    pub fn start(command: &str, resolved: &Resolved, fingerprint: &str, inputs: Vec<PathBuf>) -> (Self, Instant) {
        let m = Self {
            command: command.to_string(),
            status: Status::Running,
            fingerprint: fingerprint.to_string(),
            config_path: resolved.path.clone(),
            config: resolved.snapshot.clone(),
            config_sha256: resolved.sha256.clone(),
            seed: resolved.config.seed,
            inputs,
            outputs: Vec::new(),
            version: VERSION.to_string(),
            duration_secs: 0.0,
        };
        (m, Instant::now())
    }

    pub fn write(&self, dir: &Path) -> anyhow::Result<()> {
        write_atomic(&dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?.as_bytes())?;
        Ok(())
    }

    pub fn finish(mut self, dir: &Path, started: Instant, outputs: Vec<PathBuf>) -> anyhow::Result<Self> {
        self.status = Status::Complete;
        self.outputs = outputs;
        self.duration_secs = started.elapsed().as_secs_f64();
        self.write(dir)?;
        Ok(self)
    }

    pub fn read(dir: &Path) -> Option<Self> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE)).ok()?;
        serde_json::from_str(&text).ok()
    }
}

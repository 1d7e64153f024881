use std::path::{Path, PathBuf};

use serde::Serialize;
use stun_core::io::write_atomic;

/// A checkpoint consumed by a command.
#[derive(Debug, Serialize)]
pub struct CheckpointRef {
    pub path: PathBuf,
    pub kind: stun_core::model::NetKind,
    pub config_hash: String,
}

#[derive(Debug, Serialize)]
pub struct DatasetRef {
    pub path: PathBuf,
    pub fingerprint: String,
}

/// Record of one command invocation: what it read and everything it wrote.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: u64,
    pub config_hash: Option<String>,
    /// Effective configuration, TOML.
    pub config: Option<String>,
    pub dataset: Option<DatasetRef>,
    pub checkpoints: Vec<CheckpointRef>,
    pub metrics: Option<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_hash: None,
            config: None,
            dataset: None,
            checkpoints: Vec::new(),
            metrics: None,
            outputs: Vec::new(),
        }
    }

    pub fn with_config(mut self, cfg: &stun_core::ExperimentConfig) -> Self {
        self.config_hash = Some(cfg.training_hash());
        self.config = Some(cfg.to_toml_string());
        self
    }

    /// Writes `run-<command>.json` into `dir` and returns its path.
    pub fn write(mut self, dir: &Path) -> stun_core::Result<PathBuf> {
        let path = dir.join(format!("run-{}.json", self.command));
        self.outputs.push(path.clone());
        let text = serde_json::to_string_pretty(&self)? + "\n";
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

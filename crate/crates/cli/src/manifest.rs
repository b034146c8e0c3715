//! Run manifest: one JSON file per invocation naming every artifact it
//! produced, keyed by the config hash so any CSV row can be traced back
//! to the exact config + overrides that made it. No timestamps — two runs
//! of the same config produce byte-identical manifests.

use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub run_id: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    /// Hash of the eval prompt set, present for commands that read one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prompt_hash: Option<String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(run_id: &str, command: &str, config_hash: &str, seed: u64) -> Self {
        Manifest {
            run_id: run_id.to_string(),
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            prompt_hash: None,
            outputs: Vec::new(),
        }
    }

    pub fn push_output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    /// Write `<run-id>_manifest` into `out_dir`, returning its path.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir)?;
        let path = out_dir.join(format!("{}_manifest", self.run_id));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)?;
        Ok(path)
    }
}

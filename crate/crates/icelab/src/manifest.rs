//! Run manifests: what command ran, with which configuration and
//! seeds, and which files it produced. The manifest is the only output
//! that carries wall-clock times.

use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use icelab_core::corpus::Provenance;

use crate::config::RunConfig;
use crate::report::write_json;
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: RunConfig,
    pub dataset: Option<Provenance>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Builder capturing the start time when the command begins.
pub struct ManifestDraft {
    command: String,
    config: RunConfig,
    dataset: Option<Provenance>,
    started_unix: u64,
    outputs: Vec<String>,
}

impl ManifestDraft {
    pub fn begin(command: &str, config: &RunConfig) -> ManifestDraft {
        ManifestDraft {
            command: command.to_string(),
            config: config.clone(),
            dataset: None,
            started_unix: now_unix(),
            outputs: Vec::new(),
        }
    }

    pub fn dataset(&mut self, provenance: Provenance) {
        self.dataset = Some(provenance);
    }

    pub fn produced(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Write `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path) -> Result<()> {
        let path = dir.join("manifest.json");
        self.outputs.push(path.display().to_string());
        let manifest = RunManifest {
            command: self.command,
            config: self.config,
            dataset: self.dataset,
            started_unix: self.started_unix,
            finished_unix: now_unix(),
            outputs: self.outputs,
        };
        write_json(&path, &manifest)
    }
}

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{SecondsFormat, Utc};
use lsg_core::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Provenance record written next to every command's outputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: Option<TrainConfig>,
    pub config_hash: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: Option<String>,
}

pub fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config: None,
            config_hash: None,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            seed: None,
            started: now(),
            finished: None,
        }
    }

    pub fn with_config(mut self, cfg: &TrainConfig) -> Self {
        self.config_hash = Some(cfg.hash());
        self.seed = Some(cfg.seed);
        self.config = Some(cfg.clone());
        self
    }

    pub fn input(mut self, name: &str, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.display().to_string());
        self
    }

    pub fn output(mut self, name: &str, path: &Path) -> Self {
        self.outputs.insert(name.into(), path.display().to_string());
        self
    }

    pub fn finish(mut self, path: &Path) -> Result<(), CliError> {
        self.finished = Some(now());
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        std::fs::write(path, text + "\n")
            .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
    }
}

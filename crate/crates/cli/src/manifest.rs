use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context as _, Result};
use serde::{Deserialize, Serialize};

/// Record of one invocation, written next to its outputs. Holds everything
/// needed to rerun it; nothing that varies between identical runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub network_fingerprint: Option<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, seed: u64, config: serde_json::Value) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config,
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
            network_fingerprint: None,
        }
    }

    pub fn input(&mut self, key: &str, path: &Path) {
        self.inputs.insert(key.to_string(), path.display().to_string());
    }

    pub fn file_name(subcommand: &str) -> String {
        format!("manifest_{subcommand}.json")
    }

    pub fn write(&self, out_dir: &Path) -> Result<()> {
        let path = out_dir.join(Self::file_name(&self.subcommand));
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

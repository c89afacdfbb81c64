use std::path::{Path, PathBuf};

use anyhow::Context;
use htnet::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Experiment file for `htnet train`. Every field is optional; command-line flags
/// override what the file says.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Training PoseSet; `--data` takes precedence.
    pub data: Option<PathBuf>,
    /// Output directory; `--out` takes precedence.
    pub out: Option<PathBuf>,
    /// Seed for parameter initialization. Defaults to `train.seed` when absent.
    pub init_seed: Option<u64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn validate(&self) -> htnet::Result<()> {
        self.model.validate()?;
        self.train.validate()
    }
}

//! Layered settings: built-in defaults, then an optional TOML file, then
//! command-line flags.

use std::path::Path;

use anyhow::{Context, Result};
use cpcomp::rank::{DEFAULT_PROBE_EPOCHS, DEFAULT_PROBE_RANK};
use cpcomp::train::data::{PATTERN_TEST, PATTERN_TRAIN};
use cpcomp::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Every tunable default. `cpcomp config` prints the effective values.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Fine-tuning settings; `train.seed` seeds every subcommand.
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub data: DataConfig,
    pub verify: VerifyConfig,
    pub schedule: ScheduleConfig,
    pub alexnet: AlexnetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub rank: usize,
    pub epochs: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            rank: DEFAULT_PROBE_RANK,
            epochs: DEFAULT_PROBE_EPOCHS,
        }
    }
}

/// Sample counts of the built-in task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: usize,
    pub test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: PATTERN_TRAIN,
            test: PATTERN_TEST,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub cases: usize,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self { cases: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    /// Rank of each layer as a fraction of its full rank, when no ranks
    /// file is given to `train`.
    pub rank_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { rank_fraction: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlexnetConfig {
    /// `fused-input` or `per-group`.
    pub convention: String,
}

impl Default for AlexnetConfig {
    fn default() -> Self {
        Self {
            convention: "fused-input".into(),
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

//! Run configuration: one TOML file with a section per stage.

use std::fs;
use std::path::Path;

use anyhow::Result;
use iae_core::bidding::{ExperimentConfig, MarketConfig};
use iae_core::evaluation::EvalConfig;
use iae_core::model::ModelConfig;
use iae_core::synthetic::GenConfig;
use iae_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::InputError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluateConfig {
    /// IPM weight used for the surrogate bound.
    pub beta: f64,
    #[serde(flatten)]
    pub eval: EvalConfig,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            beta: 1.0,
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub generate: GenConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    pub market: MarketConfig,
    pub experiment: ExperimentConfig,
}

impl RunConfig {
    /// Defaults, or the file at `path` on top of them.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text =
            fs::read_to_string(path).map_err(|e| InputError(format!("cannot read config {}: {e}", path.display())))?;
        let cfg = toml::from_str(&text).map_err(|e| InputError(format!("config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

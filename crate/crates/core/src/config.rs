//! Run configuration: every hyperparameter in one TOML file with one section
//! per module.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::affinity::AffinityConfig;
use crate::encoder::EncoderConfig;
use crate::error::{ModtError, Result};
use crate::heads::HeadConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::scans::SceneConfig;
use crate::tracker::TrackerConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Largest center distance counted as a match (meters).
    pub dist_max: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { dist_max: 1.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds scene synthesis and parameter initialization.
    pub seed: u64,
    pub scene: SceneConfig,
    pub encoder: EncoderConfig,
    pub affinity: AffinityConfig,
    pub heads: HeadConfig,
    pub losses: LossWeights,
    pub tracker: TrackerConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            affinity: self.affinity.clone(),
            heads: self.heads.clone(),
            losses: self.losses.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model().validate()?;
        self.tracker.validate()?;
        self.train.validate()?;
        if !(self.eval.dist_max > 0.0 && self.eval.dist_max.is_finite()) {
            return Err(ModtError::Config("eval: dist_max must be positive".into()));
        }
        Ok(())
    }

    /// Parses and validates.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ModtError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ModtError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ModtError::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text).map_err(|e| match e {
            ModtError::Config(m) => ModtError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

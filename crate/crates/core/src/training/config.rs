use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

/// Optimization knobs; field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Weight of the masked background reconstruction term.
    pub lambda: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub lr_generator: f64,
    pub lr_discriminator: f64,
    pub erosion_radius_px: u32,
    pub seed: u64,
    pub d_steps_per_g_step: usize,
    /// Write a numbered checkpoint every this many steps.
    pub checkpoint_every: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            batch_size: 8,
            steps: 2000,
            lr_generator: 2e-4,
            lr_discriminator: 2e-4,
            erosion_radius_px: 2,
            seed: 0,
            d_steps_per_g_step: 1,
            checkpoint_every: 500,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        for (name, lr) in [("lr_generator", self.lr_generator), ("lr_discriminator", self.lr_discriminator)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.d_steps_per_g_step == 0 {
            return Err(Error::Config("d_steps_per_g_step must be positive".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Contents of a training config file: the training keys at top level, an
/// optional corpus path and a `[model]` table.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(flatten)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub model: ModelConfig,
}

impl TrainFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }
}

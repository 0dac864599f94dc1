use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters shared by generator and discriminators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub gene_dim: usize,
    /// Length of the gene code.
    pub code_dim: usize,
    pub noise_dim: usize,
    pub mapping_hidden: usize,
    /// Square input side.
    pub image_size: usize,
    /// Encoder/decoder channels from the finest level to the coarsest.
    pub channels: Vec<usize>,
    pub head_channels: usize,
    pub disc_channels: Vec<usize>,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub adain_eps: f64,
    pub mask_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            gene_dim: 64,
            code_dim: 128,
            noise_dim: 32,
            mapping_hidden: 128,
            image_size: 64,
            channels: vec![32, 64, 128, 256],
            head_channels: 16,
            disc_channels: vec![32, 64, 128, 256],
            leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            adain_eps: 1e-5,
            mask_threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn style_dim(&self) -> usize {
        self.code_dim + self.noise_dim
    }

    /// Spatial side of encoder level `l` (1-based).
    pub fn level_size(&self, l: usize) -> usize {
        self.image_size >> l
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.levels();
        if l == 0 {
            return Err(Error::Config("channels must list at least one level".into()));
        }
        if self.image_size == 0 || self.image_size % (1 << l) != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by 2^{l} = {}",
                self.image_size,
                1usize << l
            )));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("channel schedule {:?} must be non-decreasing", self.channels)));
        }
        let dl = self.disc_channels.len();
        if dl == 0 || self.image_size % (1 << dl) != 0 {
            return Err(Error::Config(format!("disc_channels {:?} incompatible with image_size", self.disc_channels)));
        }
        let sizes = [self.gene_dim, self.code_dim, self.mapping_hidden, self.head_channels];
        if sizes.contains(&0) || self.channels.contains(&0) || self.disc_channels.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must be in [0, 1]".into()));
        }
        Ok(())
    }
}

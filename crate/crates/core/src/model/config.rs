//! Generator, discriminator, loss and optimiser settings.

use serde::{Deserialize, Serialize};

use crate::depth::DepthConfig;
use crate::error::{Error, Result};
use crate::mppa::MppaConfig;
use crate::patch::HeadConfig;

/// Leaky-ReLU slope used throughout the generator and discriminator.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    /// Four 3×3 encoder convolutions with strides (2, 1, 2, 1); the last width
    /// is the transformer width.
    pub encoder_channels: Vec<usize>,
    /// Widths of the first three decoder convolutions; the fourth outputs RGB.
    pub decoder_channels: Vec<usize>,
    pub blocks: usize,
    pub heads: HeadConfig,
    pub depth: DepthConfig,
    pub mppa: MppaConfig,
    /// Hidden width of the spatial/temporal gate perceptron.
    pub gate_hidden: usize,
    /// Spectral-normalise generator convolutions.
    pub spectral_norm: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 240,
            width: 432,
            encoder_channels: vec![64, 64, 128, 256],
            decoder_channels: vec![128, 64, 64],
            blocks: 8,
            heads: HeadConfig::default(),
            depth: DepthConfig::default(),
            mppa: MppaConfig::default(),
            gate_hidden: 16,
            spectral_norm: true,
        }
    }
}

impl GeneratorConfig {
    /// 48×48 frames, 16 channels, one block, no generator spectral norm.
    pub fn toy() -> Self {
        Self {
            height: 48,
            width: 48,
            encoder_channels: vec![16, 16, 16, 16],
            decoder_channels: vec![16, 16, 16],
            blocks: 1,
            spectral_norm: false,
            ..Self::default()
        }
    }

    pub fn channels(&self) -> usize {
        self.encoder_channels.last().copied().unwrap_or(0)
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.height / 4, self.width / 4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_channels.len() != 4 || self.decoder_channels.len() != 3 {
            return Err(Error::Invalid(
                "encoder_channels needs 4 entries and decoder_channels 3".into(),
            ));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) || self.gate_hidden == 0 {
            return Err(Error::Invalid("channel widths must be positive".into()));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Divisibility { n: 4, h: self.height, w: self.width });
        }
        if self.depth.motion_dim == 0 {
            return Err(Error::Invalid("motion_dim must be positive".into()));
        }
        let (h, w) = self.feature_size();
        self.heads.validate(self.channels(), h, w)
    }

    /// Bounds accepted by the toy trainer.
    pub fn check_toy(&self, frames: usize) -> Result<()> {
        let widest = self.encoder_channels.iter().chain(&self.decoder_channels).max().copied().unwrap_or(0);
        if widest > 32 || self.blocks > 1 || self.height > 64 || self.width > 64 || frames > 8 {
            return Err(Error::Invalid(format!(
                "toy training needs ≤ 32 channels, ≤ 1 block, ≤ 64×64 frames and ≤ 8 frames \
                 (got {widest} channels, {} blocks, {}×{}, {frames} frames)",
                self.blocks, self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub channels: Vec<usize>,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    /// Power-iteration steps per forward pass (the estimate is carried over).
    pub power_iters: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256, 256, 256, 256],
            kernel: [3, 5, 5],
            stride: [1, 2, 2],
            padding: [1, 2, 2],
            power_iters: 1,
        }
    }
}

impl DiscriminatorConfig {
    pub fn toy() -> Self {
        Self {
            channels: vec![8, 16, 16, 16, 16, 16],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.len() != 6 || self.channels.contains(&0) {
            return Err(Error::Invalid("the discriminator has six layers with positive widths".into()));
        }
        if self.kernel.contains(&0) || self.stride.contains(&0) || self.power_iters == 0 {
            return Err(Error::Invalid("kernel, stride and power_iters must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub hole: f64,
    pub valid: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            hole: 1.0,
            valid: 1.0,
            adv: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.hole, self.valid, self.adv].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Invalid("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

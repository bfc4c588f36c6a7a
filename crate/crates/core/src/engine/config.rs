use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Block layout of the transformer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Separate image/encoder parameters, joint attention (MMDiT).
    #[default]
    DualStream,
    /// One parameter set over the concatenated token sequence.
    SingleStream,
}

/// A constant offset added by every block to a fixed set of image-stream
/// channels, so that a seeded random engine exhibits a known set of
/// massive channels (and optionally a known foreground region).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationPlant {
    pub channels: Vec<usize>,
    /// Image tokens that receive the offset; all tokens when absent.
    #[serde(default)]
    pub tokens: Option<Vec<usize>>,
    pub amplitude: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    /// Number of transformer blocks.
    pub depth: usize,
    /// Channel count of every hidden state (and of the latent).
    pub width: usize,
    pub heads: usize,
    pub latent_h: usize,
    pub latent_w: usize,
    /// Number of prompt tokens.
    pub encoder_len: usize,
    /// Euler steps from t = 1 to t = 0.
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub variant: Variant,
    /// Size of the toy prompt vocabulary.
    pub vocab: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plant: Option<ActivationPlant>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            width: 32,
            heads: 4,
            latent_h: 8,
            latent_w: 8,
            encoder_len: 8,
            steps: 4,
            seed: 7,
            variant: Variant::DualStream,
            vocab: 64,
            plant: None,
        }
    }
}

impl EngineConfig {
    /// Number of image tokens, `latent_h * latent_w`.
    pub fn image_tokens(&self) -> usize {
        self.latent_h * self.latent_w
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Uniform time grid `t_i = 1 - i / steps`, `i = 0..=steps`.
    pub fn time_grid(&self) -> Vec<f32> {
        (0..=self.steps)
            .map(|i| 1.0 - i as f32 / self.steps as f32)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("depth", self.depth),
            ("width", self.width),
            ("heads", self.heads),
            ("latent_h", self.latent_h),
            ("latent_w", self.latent_w),
            ("encoder_len", self.encoder_len),
            ("steps", self.steps),
            ("vocab", self.vocab),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "D mod heads ≠ 0 (width {} is not a multiple of heads {})",
                self.width, self.heads
            )));
        }
        if self.depth < 3 {
            return Err(Error::Config(format!(
                "depth must be at least 3 so every layer regime is non-empty, got {}",
                self.depth
            )));
        }
        if self.steps > usize::from(u16::MAX) || self.depth > usize::from(u16::MAX) {
            return Err(Error::Config(
                "depth and steps must fit in 16 bits".to_string(),
            ));
        }
        if let Some(plant) = &self.plant {
            if !plant.amplitude.is_finite() {
                return Err(Error::Config("plant.amplitude must be finite".into()));
            }
            if let Some(&c) = plant.channels.iter().find(|&&c| c >= self.width) {
                return Err(Error::Config(format!(
                    "plant channel {c} out of range for width {}",
                    self.width
                )));
            }
            if let Some(tokens) = &plant.tokens {
                if let Some(&n) = tokens.iter().find(|&&n| n >= self.image_tokens()) {
                    return Err(Error::Config(format!(
                        "plant token {n} out of range for {} image tokens",
                        self.image_tokens()
                    )));
                }
            }
        }
        Ok(())
    }
}

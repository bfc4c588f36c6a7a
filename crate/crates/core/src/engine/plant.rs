//! Synthetic trajectories with known massive channels and foreground.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{initial_noise, ActivationTensor, CapturePoint, EngineConfig, Stream, Trajectory};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Ground truth for a planted trajectory.
///
/// Every captured image activation is `A` on `foreground × channels` plus
/// i.i.d. Gaussian noise of standard deviation `noise` on every entry; the
/// encoder stream is noise only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSpec {
    /// Supplies the grid, width, depth, step count and prompt length.
    pub config: EngineConfig,
    pub foreground: Vec<usize>,
    pub channels: Vec<usize>,
    pub amplitude: f32,
    pub noise: f32,
    pub seed: u64,
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.config.image_tokens();
        let d = self.config.width;
        if let Some(&bad) = self.foreground.iter().find(|&&t| t >= n) {
            return Err(Error::Config(format!("foreground token {bad} out of range for {n} tokens")));
        }
        if let Some(&bad) = self.channels.iter().find(|&&c| c >= d) {
            return Err(Error::Config(format!("planted channel {bad} out of range for width {d}")));
        }
        if !(self.amplitude > 0.0 && self.amplitude.is_finite()) {
            return Err(Error::Config(format!("amplitude must be positive, got {}", self.amplitude)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise scale must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }

    /// Ground-truth foreground as a per-token boolean vector.
    pub fn foreground_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.config.image_tokens()];
        for &t in &self.foreground {
            mask[t] = true;
        }
        mask
    }
}

/// Synthesizes a trajectory whose captured activations follow `plant`.
/// No transformer is run; the latents are the seeded initial noise held
/// constant across steps.
pub fn planted_sample(plant: &PlantSpec) -> Result<Trajectory> {
    plant.validate()?;
    let cfg = &plant.config;
    let (n_img, n_enc, d) = (cfg.image_tokens(), cfg.encoder_len, cfg.width);
    let fg = plant.foreground_mask();
    let mut massive = vec![false; d];
    for &c in &plant.channels {
        massive[c] = true;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plant.seed);
    let noise = |rng: &mut ChaCha8Rng| -> f32 {
        let z: f32 = StandardNormal.sample(rng);
        z * plant.noise
    };

    let mut captured = BTreeMap::new();
    for layer in 0..cfg.depth {
        for timestep in 0..cfg.steps {
            let img = Matrix::from_fn(n_img, d, |r, c| {
                let base = if fg[r] && massive[c] { plant.amplitude } else { 0.0 };
                base + noise(&mut rng)
            });
            let enc = Matrix::from_fn(n_enc, d, |_, _| noise(&mut rng));
            for (stream, data) in [(Stream::Image, img), (Stream::Encoder, enc)] {
                captured.insert(
                    CapturePoint::new(layer, timestep, stream),
                    ActivationTensor::new(stream, layer, timestep, data),
                );
            }
        }
    }

    let init = initial_noise(cfg);
    Ok(Trajectory {
        config: cfg.clone(),
        prompt: vec![0; n_enc],
        latents: vec![init.clone(); cfg.steps + 1],
        final_latent: init.clone(),
        initial_noise: init,
        captured,
    })
}

//! Miniature flow-matching diffusion transformer with a hookable sampler.
//!
//! The engine holds seeded, untrained weights for a stack of MMDiT-style
//! blocks (or a single-stream variant). [`Engine::sample`] integrates the
//! predicted velocity field with explicit Euler steps from `t = 1` to
//! `t = 0`; after each block, every registered [`Hook`] may rewrite the
//! image and encoder hidden states before they are captured and fed to
//! the next block.

mod block;
mod config;
mod plant;
mod weights;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use config::{ActivationPlant, EngineConfig, Variant};
pub use plant::{planted_sample, PlantSpec};
pub use weights::{BlockWeights, EngineWeights, StreamWeights, MLP_RATIO};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// RNG stream reserved for initial noise, separate from weight draws.
const NOISE_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Image,
    Encoder,
}

impl Stream {
    pub const ALL: [Stream; 2] = [Stream::Image, Stream::Encoder];

    pub fn code(self) -> u8 {
        match self {
            Stream::Image => 0,
            Stream::Encoder => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Stream::Image),
            1 => Some(Stream::Encoder),
            _ => None,
        }
    }
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::Image => "image",
            Stream::Encoder => "encoder",
        })
    }
}

/// One stream's hidden states at a (layer, timestep) point.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTensor {
    pub stream: Stream,
    pub layer: usize,
    pub timestep: usize,
    /// `N_α × D`.
    pub data: Matrix,
}

impl ActivationTensor {
    pub fn new(stream: Stream, layer: usize, timestep: usize, data: Matrix) -> Self {
        Self {
            stream,
            layer,
            timestep,
            data,
        }
    }

    pub fn point(&self) -> CapturePoint {
        CapturePoint {
            layer: self.layer,
            timestep: self.timestep,
            stream: self.stream,
        }
    }

    pub fn tokens(&self) -> usize {
        self.data.rows()
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }
}

/// Address of one intervention/capture point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CapturePoint {
    pub layer: usize,
    pub timestep: usize,
    pub stream: Stream,
}

impl CapturePoint {
    pub fn new(layer: usize, timestep: usize, stream: Stream) -> Self {
        Self {
            layer,
            timestep,
            stream,
        }
    }
}

/// Which post-hook activations a sampling run records.
#[derive(Debug, Clone, Default, PartialEq)]
pub enum CaptureSpec {
    #[default]
    Nothing,
    All,
    Points(BTreeSet<CapturePoint>),
}

impl CaptureSpec {
    pub fn wants(&self, point: &CapturePoint) -> bool {
        match self {
            CaptureSpec::Nothing => false,
            CaptureSpec::All => true,
            CaptureSpec::Points(p) => p.contains(point),
        }
    }

    /// Every timestep and both streams at the given layers.
    pub fn layers(layers: &[usize], steps: usize) -> Self {
        let mut points = BTreeSet::new();
        for &layer in layers {
            for timestep in 0..steps {
                for stream in Stream::ALL {
                    points.insert(CapturePoint::new(layer, timestep, stream));
                }
            }
        }
        CaptureSpec::Points(points)
    }
}

/// An intervention applied after a block computes one stream's output.
///
/// Hooks must return a tensor with the same stream, layer, timestep and
/// shape as their input. They may read external state but must not depend
/// on the engine's internals.
pub trait Hook: Send + Sync {
    fn apply(&self, act: ActivationTensor) -> Result<ActivationTensor>;
}

impl<F> Hook for F
where
    F: Fn(ActivationTensor) -> Result<ActivationTensor> + Send + Sync,
{
    fn apply(&self, act: ActivationTensor) -> Result<ActivationTensor> {
        self(act)
    }
}

/// Full record of one sampling run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub config: EngineConfig,
    pub prompt: Vec<u32>,
    pub initial_noise: Matrix,
    /// `steps + 1` latents; the first is the initial noise, the last the final latent.
    pub latents: Vec<Matrix>,
    pub captured: BTreeMap<CapturePoint, ActivationTensor>,
    pub final_latent: Matrix,
}

impl Trajectory {
    pub fn activation(&self, layer: usize, timestep: usize, stream: Stream) -> Option<&ActivationTensor> {
        self.captured.get(&CapturePoint::new(layer, timestep, stream))
    }

    /// Bitwise equality of every latent and captured activation.
    pub fn bit_eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.prompt == other.prompt
            && self.initial_noise.bit_eq(&other.initial_noise)
            && self.final_latent.bit_eq(&other.final_latent)
            && self.latents.len() == other.latents.len()
            && self.latents.iter().zip(&other.latents).all(|(a, b)| a.bit_eq(b))
            && self.captured.len() == other.captured.len()
            && self.captured.iter().zip(&other.captured).all(|((ka, a), (kb, b))| {
                ka == kb && a.data.bit_eq(&b.data)
            })
    }
}

/// Seeded, immutable transformer.
#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    weights: EngineWeights,
}

impl Engine {
    /// Validates `config` and draws all weights from its seed.
    pub fn new(config: EngineConfig) -> Result<Self> {
        config.validate()?;
        let weights = EngineWeights::seeded(&config);
        Ok(Self { config, weights })
    }

    /// Builds an engine around externally supplied weights (e.g. a seeded
    /// set with some parameters overridden).
    pub fn from_weights(config: EngineConfig, weights: EngineWeights) -> Result<Self> {
        config.validate()?;
        if let Some(msg) = weights.shapes_match(&config) {
            return Err(Error::Config(format!("weight shape mismatch: {msg}")));
        }
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn weights(&self) -> &EngineWeights {
        &self.weights
    }

    /// Initial latent for this engine's seed. Independent of the prompt.
    pub fn initial_noise(&self) -> Matrix {
        initial_noise(&self.config)
    }

    /// Runs the Euler sampler, applying `hooks` in order at every
    /// (layer, timestep, stream) and recording the post-hook activations
    /// selected by `capture`.
    pub fn sample(&self, prompt: &[u32], capture: &CaptureSpec, hooks: &[&dyn Hook]) -> Result<Trajectory> {
        let cfg = &self.config;
        let x_enc0 = self.embed_prompt(prompt)?;
        let noise = self.initial_noise();
        let grid = cfg.time_grid();

        let mut latents = Vec::with_capacity(cfg.steps + 1);
        latents.push(noise.clone());
        let mut captured = BTreeMap::new();
        let mut x = noise.clone();

        for timestep in 0..cfg.steps {
            let t = grid[timestep];
            let dt = grid[timestep + 1] - t;
            let cond = self.condition(t);
            let mut img = self.embed_image(&x)?;
            let mut enc = x_enc0.clone();
            for layer in 0..cfg.depth {
                let (bi, be) = self.forward_block(layer, &img, &enc, &cond)?;
                img = self.run_hooks(hooks, ActivationTensor::new(Stream::Image, layer, timestep, bi))?;
                enc = self.run_hooks(hooks, ActivationTensor::new(Stream::Encoder, layer, timestep, be))?;
                for (stream, data) in [(Stream::Image, &img), (Stream::Encoder, &enc)] {
                    let point = CapturePoint::new(layer, timestep, stream);
                    if capture.wants(&point) {
                        captured.insert(point, ActivationTensor::new(stream, layer, timestep, data.clone()));
                    }
                }
            }
            let v = self.velocity(&img, &cond)?;
            for (xv, vv) in x.as_mut_slice().iter_mut().zip(v.as_slice()) {
                *xv += dt * vv;
            }
            if !x.is_finite() {
                return Err(Error::Numeric(format!("latent became non-finite at timestep {timestep}")));
            }
            latents.push(x.clone());
        }

        Ok(Trajectory {
            config: cfg.clone(),
            prompt: prompt.to_vec(),
            initial_noise: noise,
            latents,
            captured,
            final_latent: x,
        })
    }

    fn run_hooks(&self, hooks: &[&dyn Hook], act: ActivationTensor) -> Result<Matrix> {
        let point = act.point();
        let shape = act.data.shape();
        let fail = |reason: String| Error::Intervention {
            layer: point.layer,
            timestep: point.timestep,
            stream: point.stream,
            reason,
        };
        let mut act = act;
        for hook in hooks {
            act = hook.apply(act)?;
            if act.point() != point {
                return Err(fail(format!("hook relabelled the activation as {:?}", act.point())));
            }
            if act.data.shape() != shape {
                return Err(fail(format!(
                    "hook returned shape {:?}, expected {shape:?}",
                    act.data.shape()
                )));
            }
            if !act.data.is_finite() {
                return Err(fail("hook returned non-finite values".into()));
            }
        }
        Ok(act.data)
    }
}

/// Standard-normal `N_I × D` latent drawn from a stream of the config seed
/// that is disjoint from the weight stream.
pub fn initial_noise(config: &EngineConfig) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(NOISE_STREAM);
    Matrix::from_fn(config.image_tokens(), config.width, |_, _| {
        StandardNormal.sample(&mut rng)
    })
}

//! Channel-disruption probe: zero a channel selection at chosen
//! (layer, timestep, stream) points and compare the final latent with an
//! undisrupted baseline drawn from the same noise.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{ActivationTensor, CaptureSpec, Engine, Hook, Stream, Trajectory};
use crate::error::Result;
use crate::stats::{channel_means, select_channels, ChannelCriterion, ChannelScore};
use crate::tensor::Matrix;
use crate::transport::{LayerSet, StepSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamTarget {
    #[default]
    Image,
    Encoder,
    Both,
}

impl StreamTarget {
    pub fn covers(self, stream: Stream) -> bool {
        matches!(
            (self, stream),
            (StreamTarget::Both, _) | (StreamTarget::Image, Stream::Image) | (StreamTarget::Encoder, Stream::Encoder)
        )
    }
}

impl fmt::Display for StreamTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StreamTarget::Image => "image",
            StreamTarget::Encoder => "encoder",
            StreamTarget::Both => "both",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisruptionSpec {
    #[serde(default)]
    pub stream: StreamTarget,
    pub criterion: ChannelCriterion,
    pub k: usize,
    #[serde(default)]
    pub layers: LayerSet,
    #[serde(default)]
    pub timesteps: StepSet,
    /// Seed for the random criterion; ignored otherwise.
    #[serde(default)]
    pub seed: u64,
}

/// Recomputes channel statistics from the live activation at a point.
pub type ScoreProvider = fn(&ActivationTensor) -> Result<ChannelScore>;

/// Hook that zeroes the selected channels at matching points and passes
/// everything else through untouched.
pub struct DisruptHook {
    spec: DisruptionSpec,
    layers: BTreeSet<usize>,
    timesteps: BTreeSet<usize>,
    score_provider: ScoreProvider,
}

impl DisruptHook {
    pub fn matches(&self, act: &ActivationTensor) -> bool {
        self.spec.stream.covers(act.stream) && self.layers.contains(&act.layer) && self.timesteps.contains(&act.timestep)
    }
}

impl Hook for DisruptHook {
    fn apply(&self, mut act: ActivationTensor) -> Result<ActivationTensor> {
        if self.spec.k == 0 || !self.matches(&act) {
            return Ok(act);
        }
        let score = (self.score_provider)(&act)?;
        let seed = (self.spec.criterion == ChannelCriterion::Random).then_some(self.spec.seed);
        let sel = select_channels(&score, self.spec.k, self.spec.criterion, seed)?;
        for r in 0..act.data.rows() {
            let row = act.data.row_mut(r);
            for &c in &sel.indices {
                row[c] = 0.0;
            }
        }
        Ok(act)
    }
}

/// Builds the disruption hook for an engine with `depth` blocks and
/// `steps` denoising steps, using live per-point channel means.
pub fn disrupt_hook(spec: &DisruptionSpec, depth: usize, steps: usize) -> Result<DisruptHook> {
    disrupt_hook_with(spec, depth, steps, channel_means)
}

pub fn disrupt_hook_with(
    spec: &DisruptionSpec,
    depth: usize,
    steps: usize,
    score_provider: ScoreProvider,
) -> Result<DisruptHook> {
    Ok(DisruptHook {
        spec: spec.clone(),
        layers: spec.layers.resolve(depth)?.into_iter().collect(),
        timesteps: spec.timesteps.resolve(steps)?.into_iter().collect(),
        score_provider,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DisruptionReport {
    pub spec: DisruptionSpec,
    #[serde(skip)]
    pub baseline_final: Matrix,
    #[serde(skip)]
    pub disrupted_final: Matrix,
    /// RMS difference between the two final latents.
    pub latent_rmse: f64,
    /// Mean over channels of `|E_c(disrupted) - E_c(baseline)|`, where
    /// `E_c` is the mean squared value of latent channel `c`.
    pub channel_energy_change: f64,
    /// Proxy metrics as a percentage of the baseline (100 = unchanged).
    pub relative: BTreeMap<String, f64>,
}

impl DisruptionReport {
    fn new(spec: &DisruptionSpec, baseline: &Matrix, disrupted: &Matrix) -> Result<Self> {
        let latent_rmse = baseline.rmse(disrupted)?;
        let mut relative = BTreeMap::new();
        relative.insert("energy_ratio".to_string(), percent(disrupted.energy(), baseline.energy()));
        relative.insert("cosine_similarity".to_string(), cosine_percent(baseline, disrupted));
        Ok(Self {
            spec: spec.clone(),
            baseline_final: baseline.clone(),
            disrupted_final: disrupted.clone(),
            latent_rmse,
            channel_energy_change: channel_energy_change(baseline, disrupted),
            relative,
        })
    }

    pub fn energy_ratio(&self) -> f64 {
        self.relative["energy_ratio"]
    }

    pub fn row(&self) -> DisruptionRow {
        DisruptionRow {
            k: self.spec.k,
            criterion: self.spec.criterion.to_string(),
            stream: self.spec.stream.to_string(),
            layers: self.spec.layers.to_string(),
            timesteps: self.spec.timesteps.to_string(),
            latent_rmse: self.latent_rmse,
            energy_ratio: self.energy_ratio(),
        }
    }
}

/// One CSV line of a disruption sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisruptionRow {
    pub k: usize,
    pub criterion: String,
    pub stream: String,
    pub layers: String,
    pub timesteps: String,
    pub latent_rmse: f64,
    pub energy_ratio: f64,
}

fn percent(value: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        if value == 0.0 {
            100.0
        } else {
            f64::INFINITY
        }
    } else {
        100.0 * value / baseline
    }
}

fn cosine_percent(a: &Matrix, b: &Matrix) -> f64 {
    if a.bit_eq(b) {
        return 100.0;
    }
    let dot: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum();
    let norm = (a.energy() * b.energy()).sqrt();
    if norm == 0.0 {
        0.0
    } else {
        100.0 * dot / norm
    }
}

fn channel_energy_change(a: &Matrix, b: &Matrix) -> f64 {
    let (rows, cols) = a.shape();
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..cols {
        let ea: f64 = (0..rows).map(|r| f64::from(a.get(r, c)).powi(2)).sum::<f64>() / rows as f64;
        let eb: f64 = (0..rows).map(|r| f64::from(b.get(r, c)).powi(2)).sum::<f64>() / rows as f64;
        total += (eb - ea).abs();
    }
    total / cols as f64
}

/// Runs the undisrupted baseline and the disrupted trajectory from the
/// same seed (in parallel) and compares their final latents.
pub fn run_disruption(engine: &Engine, prompt: &[u32], spec: &DisruptionSpec) -> Result<DisruptionReport> {
    let (baseline, report) = rayon::join(
        || engine.sample(prompt, &CaptureSpec::Nothing, &[]),
        || disrupted_run(engine, prompt, spec, &CaptureSpec::Nothing),
    );
    let (baseline, disrupted) = (baseline?, report?);
    DisruptionReport::new(spec, &baseline.final_latent, &disrupted.final_latent)
}

/// Like [`run_disruption`] but compares against an already computed
/// baseline, which is only read.
pub fn run_disruption_against(engine: &Engine, baseline: &Trajectory, spec: &DisruptionSpec) -> Result<DisruptionReport> {
    let disrupted = disrupted_run(engine, &baseline.prompt, spec, &CaptureSpec::Nothing)?;
    DisruptionReport::new(spec, &baseline.final_latent, &disrupted.final_latent)
}

/// The disrupted trajectory alone, capturing the requested post-hook points.
pub fn disrupted_run(engine: &Engine, prompt: &[u32], spec: &DisruptionSpec, capture: &CaptureSpec) -> Result<Trajectory> {
    let cfg = engine.config();
    let hook = disrupt_hook(spec, cfg.depth, cfg.steps)?;
    engine.sample(prompt, capture, &[&hook])
}

/// One report per `k`, all other spec fields fixed; the baseline is run once.
pub fn sweep_disruption(engine: &Engine, prompt: &[u32], spec: &DisruptionSpec, ks: &[usize]) -> Result<Vec<DisruptionReport>> {
    use rayon::prelude::*;
    let baseline = engine.sample(prompt, &CaptureSpec::Nothing, &[])?;
    ks.par_iter()
        .map(|&k| {
            let spec = DisruptionSpec { k, ..spec.clone() };
            run_disruption_against(engine, &baseline, &spec)
        })
        .collect()
}

//! Activation transport between two trajectories that share initial noise.
//!
//! A frozen source run supplies activations; a merged run, started from the
//! same noise with the target prompt, has selected entries replaced by the
//! source's at chosen layers and every timestep. On the image stream the
//! replaced entries are selected channels within a foreground mask derived
//! from the source; on the encoder stream only a channel selection is used.

mod regimes;

use std::collections::BTreeSet;

use log::warn;
use serde::{Deserialize, Serialize};

pub use regimes::{layer_regimes, LayerRegimes, LayerSet, Regime, StepSet};

use crate::engine::{ActivationTensor, CaptureSpec, Engine, Hook, Stream, Trajectory, Variant};
use crate::error::{Error, Result};
use crate::spatial::{extract_mask, MaskCriterion, MaskSpec, SpatialMask, DEFAULT_MASK_K, DEFAULT_MAX_ITERS};
use crate::stats::{channel_means, make_indicator, select_channels, ChannelCriterion, ChannelIndicator, Polarity};
use crate::tensor::Matrix;

/// Image-stream channel count of the default transport preset.
pub const DEFAULT_IMAGE_K: usize = 1024;
/// Image-stream channel count of the preset tuned for the linear-attention model family.
pub const SANA_IMAGE_K: usize = 512;

/// Source timestep the spatial mask is read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFrom {
    /// The same (layer, timestep) as the intervention.
    #[default]
    PerPoint,
    /// The same layer at the last denoising step.
    LastStep,
}

/// Recipe for one transport run. Interventions apply at every timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportPlan {
    pub layers: LayerSet,
    /// Clamped to the engine width.
    pub image_k: usize,
    pub encoder_k: usize,
    pub channel_criterion: ChannelCriterion,
    pub channel_seed: u64,
    pub mask_criterion: MaskCriterion,
    pub mask_seed: u64,
    pub use_spatial_mask: bool,
    /// Top channels used to derive the spatial mask.
    pub mask_k: usize,
    pub mask_from: MaskFrom,
    pub cluster_on_normalized: bool,
}

impl Default for TransportPlan {
    fn default() -> Self {
        Self {
            layers: LayerSet::Regime(Regime::Middle),
            image_k: DEFAULT_IMAGE_K,
            encoder_k: 0,
            channel_criterion: ChannelCriterion::Top,
            channel_seed: 0,
            mask_criterion: MaskCriterion::Max,
            mask_seed: 0,
            use_spatial_mask: true,
            mask_k: DEFAULT_MASK_K,
            mask_from: MaskFrom::PerPoint,
            cluster_on_normalized: false,
        }
    }
}

/// Plan values checked and clamped against an engine.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPlan {
    pub layers: Vec<usize>,
    pub image_k: usize,
    pub encoder_k: usize,
    pub mask_k: usize,
}

impl TransportPlan {
    pub fn resolve(&self, depth: usize, width: usize) -> Result<ResolvedPlan> {
        let clamp = |name: &str, k: usize| {
            if k > width {
                warn!("{name} = {k} exceeds width {width}; clamping to {width}");
                width
            } else {
                k
            }
        };
        Ok(ResolvedPlan {
            layers: self.layers.resolve(depth)?,
            image_k: clamp("image_k", self.image_k),
            encoder_k: clamp("encoder_k", self.encoder_k),
            mask_k: clamp("mask_k", self.mask_k),
        })
    }

    fn mask_spec(&self, mask_k: usize) -> MaskSpec {
        MaskSpec {
            k: mask_k,
            channel_criterion: ChannelCriterion::Top,
            mask_criterion: self.mask_criterion,
            channel_seed: 0,
            mask_seed: self.mask_seed,
            cluster_on_normalized: self.cluster_on_normalized,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

/// Rank-1 token × channel mask `M[n, d] = p[n] · m[d]`, stored as its factors.
#[derive(Debug, Clone, PartialEq)]
pub struct JointMask {
    pub p: Vec<bool>,
    /// Must have keep-selected polarity.
    pub m: ChannelIndicator,
}

impl JointMask {
    pub fn new(p: Vec<bool>, m: ChannelIndicator) -> Result<Self> {
        if m.polarity != Polarity::KeepSelected {
            return Err(Error::InvalidArgument("joint mask needs a keep-selected channel indicator".into()));
        }
        Ok(Self { p, m })
    }

    pub fn from_spatial(mask: &SpatialMask, m: ChannelIndicator) -> Result<Self> {
        Self::new(mask.p.clone(), m)
    }

    #[inline]
    pub fn get(&self, n: usize, d: usize) -> bool {
        self.p[n] && self.m.bits[d]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.p.len(), self.m.len())
    }

    /// Dense 0/1 matrix.
    pub fn materialize(&self) -> Matrix {
        let (n, d) = self.shape();
        Matrix::from_fn(n, d, |r, c| if self.get(r, c) { 1.0 } else { 0.0 })
    }
}

fn check_pair(target: &ActivationTensor, source: &ActivationTensor) -> Result<()> {
    if target.data.shape() != source.data.shape() {
        return Err(Error::Shape(format!(
            "target {:?} and source {:?} differ in shape",
            target.data.shape(),
            source.data.shape()
        )));
    }
    Ok(())
}

/// Takes the source's value on channels where `m` is set and the target's
/// elsewhere. Entries are copied, never blended.
pub fn replace_channels(target: &ActivationTensor, source: &ActivationTensor, m: &ChannelIndicator) -> Result<ActivationTensor> {
    check_pair(target, source)?;
    if m.polarity != Polarity::KeepSelected {
        return Err(Error::InvalidArgument("channel replacement needs a keep-selected indicator".into()));
    }
    if m.len() != target.channels() {
        return Err(Error::Shape(format!("indicator has {} channels, activation {}", m.len(), target.channels())));
    }
    let mut out = target.clone();
    for r in 0..out.tokens() {
        let src = source.data.row(r);
        for (c, v) in out.data.row_mut(r).iter_mut().enumerate() {
            if m.bits[c] {
                *v = src[c];
            }
        }
    }
    Ok(out)
}

/// Takes the source's value where `M[n, d]` is set and the target's elsewhere.
pub fn replace_spatial(target: &ActivationTensor, source: &ActivationTensor, mask: &JointMask) -> Result<ActivationTensor> {
    check_pair(target, source)?;
    if mask.shape() != target.data.shape() {
        return Err(Error::Shape(format!(
            "joint mask is {:?}, activation {:?}",
            mask.shape(),
            target.data.shape()
        )));
    }
    let mut out = target.clone();
    for r in 0..out.tokens() {
        if !mask.p[r] {
            continue;
        }
        let src = source.data.row(r);
        for (c, v) in out.data.row_mut(r).iter_mut().enumerate() {
            if mask.m.bits[c] {
                *v = src[c];
            }
        }
    }
    Ok(out)
}

/// `(1 - alpha) · a + alpha · b`, the latent-interpolation baseline.
pub fn latent_lerp(a: &Matrix, b: &Matrix, alpha: f32) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("cannot interpolate {:?} and {:?}", a.shape(), b.shape())));
    }
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| (1.0 - alpha) * x + alpha * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

/// Hook that rewrites the merged run from a frozen source trajectory.
pub struct TransportHook<'a> {
    source: &'a Trajectory,
    plan: TransportPlan,
    resolved: ResolvedPlan,
    layers: BTreeSet<usize>,
    grid: (usize, usize),
    steps: usize,
    single_stream: bool,
}

impl<'a> TransportHook<'a> {
    pub fn new(engine: &Engine, source: &'a Trajectory, plan: &TransportPlan) -> Result<Self> {
        let cfg = engine.config();
        let resolved = plan.resolve(cfg.depth, cfg.width)?;
        Ok(Self {
            source,
            plan: plan.clone(),
            layers: resolved.layers.iter().copied().collect(),
            resolved,
            grid: (cfg.latent_h, cfg.latent_w),
            steps: cfg.steps,
            single_stream: cfg.variant == Variant::SingleStream,
        })
    }

    fn source_at(&self, layer: usize, timestep: usize, stream: Stream) -> Result<&'a ActivationTensor> {
        self.source.activation(layer, timestep, stream).ok_or_else(|| Error::Intervention {
            layer,
            timestep,
            stream,
            reason: "source trajectory has no capture at this point".into(),
        })
    }

    fn channel_indicator(&self, source: &ActivationTensor, k: usize) -> Result<ChannelIndicator> {
        let score = channel_means(source)?;
        let seed = (self.plan.channel_criterion == ChannelCriterion::Random).then_some(self.plan.channel_seed);
        let sel = select_channels(&score, k, self.plan.channel_criterion, seed)?;
        make_indicator(&sel, source.channels(), Polarity::KeepSelected)
    }

    fn image(&self, act: ActivationTensor) -> Result<ActivationTensor> {
        let k = self.resolved.image_k;
        if k == 0 {
            return Ok(act);
        }
        let src = self.source_at(act.layer, act.timestep, Stream::Image)?;
        let m = self.channel_indicator(src, k)?;
        if !self.plan.use_spatial_mask {
            return replace_channels(&act, src, &m);
        }
        let mask_step = match self.plan.mask_from {
            MaskFrom::PerPoint => act.timestep,
            MaskFrom::LastStep => self.steps - 1,
        };
        let mask_src = self.source_at(act.layer, mask_step, Stream::Image)?;
        let p = extract_mask(mask_src, self.grid, &self.plan.mask_spec(self.resolved.mask_k))?;
        replace_spatial(&act, src, &JointMask::from_spatial(&p, m)?)
    }

    fn encoder(&self, act: ActivationTensor) -> Result<ActivationTensor> {
        // A single-stream block has no separate encoder parameters, so its
        // text tokens follow the image channel budget.
        let k = if self.single_stream {
            self.resolved.image_k
        } else {
            self.resolved.encoder_k
        };
        if k == 0 {
            return Ok(act);
        }
        let src = self.source_at(act.layer, act.timestep, Stream::Encoder)?;
        let m = self.channel_indicator(src, k)?;
        replace_channels(&act, src, &m)
    }
}

impl Hook for TransportHook<'_> {
    fn apply(&self, act: ActivationTensor) -> Result<ActivationTensor> {
        if !self.layers.contains(&act.layer) {
            return Ok(act);
        }
        match act.stream {
            Stream::Image => self.image(act),
            Stream::Encoder => self.encoder(act),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportResult {
    pub merged: Trajectory,
    pub source: Trajectory,
    pub target: Trajectory,
}

/// Source run (frozen), unmodified target run, and merged run, all from the
/// engine's shared initial noise. Each captures both streams at the plan's
/// layers for every timestep.
pub fn run_transport(engine: &Engine, prompt_source: &[u32], prompt_target: &[u32], plan: &TransportPlan) -> Result<TransportResult> {
    let cfg = engine.config();
    let resolved = plan.resolve(cfg.depth, cfg.width)?;
    let capture = CaptureSpec::layers(&resolved.layers, cfg.steps);
    let source = engine.sample(prompt_source, &capture, &[])?;
    let (target, merged) = rayon::join(
        || engine.sample(prompt_target, &capture, &[]),
        || merge_into(engine, &source, prompt_target, plan, &capture),
    );
    Ok(TransportResult {
        merged: merged?,
        source,
        target: target?,
    })
}

/// The merged run alone, against an existing source trajectory that holds
/// captures at every plan layer and timestep.
pub fn merge_into(engine: &Engine, source: &Trajectory, prompt_target: &[u32], plan: &TransportPlan, capture: &CaptureSpec) -> Result<Trajectory> {
    let hook = TransportHook::new(engine, source, plan)?;
    engine.sample(prompt_target, capture, &[&hook])
}

/// Configurations swept by [`sweep_transport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportGrid {
    pub layers: Vec<LayerSet>,
    pub image_k: Vec<usize>,
    pub encoder_k: Vec<usize>,
}

/// One CSV line of a transport sweep, averaged over prompt pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportRow {
    pub regime: String,
    pub image_k: usize,
    pub encoder_k: usize,
    pub mask_criterion: String,
    /// RMS distance of the merged final latent to the source's.
    #[serde(rename = "delta_S")]
    pub delta_s: f64,
    /// RMS distance of the merged final latent to the target's.
    #[serde(rename = "delta_T")]
    pub delta_t: f64,
    /// `delta_t - delta_s`; positive when the merge sits closer to the source.
    pub delta_diff: f64,
}

/// Runs every `(layers, image_k, encoder_k)` combination over every prompt
/// pair, with the remaining plan fields taken from `base`.
pub fn sweep_transport(
    engine: &Engine,
    pairs: &[(Vec<u32>, Vec<u32>)],
    grid: &TransportGrid,
    base: &TransportPlan,
) -> Result<Vec<TransportRow>> {
    use rayon::prelude::*;
    if pairs.is_empty() {
        return Err(Error::EmptyInput("transport sweep needs at least one prompt pair".into()));
    }
    let width = engine.config().width;
    let refs = pairs
        .par_iter()
        .map(|(s, t)| {
            let source = engine.sample(s, &CaptureSpec::All, &[])?;
            let target = engine.sample(t, &CaptureSpec::Nothing, &[])?;
            Ok((source, target))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut configs = Vec::new();
    for layers in &grid.layers {
        for &image_k in &grid.image_k {
            for &encoder_k in &grid.encoder_k {
                configs.push(TransportPlan {
                    layers: layers.clone(),
                    image_k,
                    encoder_k,
                    ..base.clone()
                });
            }
        }
    }

    configs
        .par_iter()
        .map(|plan| {
            let mut delta_s = 0.0;
            let mut delta_t = 0.0;
            for ((_, prompt_t), (source, target)) in pairs.iter().zip(&refs) {
                let merged = merge_into(engine, source, prompt_t, plan, &CaptureSpec::Nothing)?;
                delta_s += merged.final_latent.rmse(&source.final_latent)?;
                delta_t += merged.final_latent.rmse(&target.final_latent)?;
            }
            let n = pairs.len() as f64;
            let (delta_s, delta_t) = (delta_s / n, delta_t / n);
            Ok(TransportRow {
                regime: plan.layers.to_string(),
                image_k: plan.image_k.min(width),
                encoder_k: plan.encoder_k.min(width),
                mask_criterion: plan.mask_criterion.to_string(),
                delta_s,
                delta_t,
                delta_diff: delta_t - delta_s,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::EngineConfig;
    use crate::stats::ChannelSelection;

    fn act(rows: &[[f32; 2]]) -> ActivationTensor {
        ActivationTensor::new(Stream::Image, 0, 0, Matrix::from_rows(rows).unwrap())
    }

    fn keep(bits: &[bool]) -> ChannelIndicator {
        ChannelIndicator {
            bits: bits.to_vec(),
            polarity: Polarity::KeepSelected,
        }
    }

    #[test]
    fn channel_replacement_by_hand() {
        let t = act(&[[1.0, 2.0], [3.0, 4.0]]);
        let s = act(&[[9.0, 8.0], [7.0, 6.0]]);
        let out = replace_channels(&t, &s, &keep(&[true, false])).unwrap();
        assert_eq!(out.data.as_slice(), &[9.0, 2.0, 7.0, 4.0]);
        assert!(replace_channels(&t, &s, &keep(&[false, false])).unwrap().data.bit_eq(&t.data));
        assert!(replace_channels(&t, &s, &keep(&[true, true])).unwrap().data.bit_eq(&s.data));
    }

    #[test]
    fn spatial_replacement_by_hand() {
        let t = act(&[[1.0, 2.0], [3.0, 4.0]]);
        let s = act(&[[9.0, 8.0], [7.0, 6.0]]);
        let m = JointMask::new(vec![true, false], keep(&[false, true])).unwrap();
        assert_eq!(replace_spatial(&t, &s, &m).unwrap().data.as_slice(), &[1.0, 8.0, 3.0, 4.0]);
        let rows = JointMask::new(vec![true, false], keep(&[true, true])).unwrap();
        assert_eq!(replace_spatial(&t, &s, &rows).unwrap().data.as_slice(), &[9.0, 8.0, 3.0, 4.0]);
    }

    #[test]
    fn zero_polarity_rejected() {
        let t = act(&[[1.0, 2.0]]);
        let m = ChannelIndicator {
            bits: vec![true, false],
            polarity: Polarity::ZeroSelected,
        };
        assert!(replace_channels(&t, &t, &m).is_err());
        assert!(JointMask::new(vec![true], m).is_err());
    }

    #[test]
    fn shape_errors() {
        let t = act(&[[1.0, 2.0]]);
        let s = act(&[[1.0, 2.0], [3.0, 4.0]]);
        assert!(matches!(replace_channels(&t, &s, &keep(&[true, true])), Err(Error::Shape(_))));
        let m = JointMask::new(vec![true, true], keep(&[true, true])).unwrap();
        assert!(matches!(replace_spatial(&t, &t, &m), Err(Error::Shape(_))));
    }

    #[test]
    fn lerp_midpoint() {
        let a = Matrix::from_rows(&[[0.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(&[[4.0, 2.0]]).unwrap();
        assert_eq!(latent_lerp(&a, &b, 0.5).unwrap().as_slice(), &[2.0, 2.0]);
    }

    #[test]
    fn presets_clamp_to_width() {
        let plan = TransportPlan::default();
        let r = plan.resolve(6, 32).unwrap();
        assert_eq!((r.image_k, r.encoder_k, r.mask_k), (32, 0, 12));
        assert_eq!(r.layers, vec![2, 3]);
        let bad = TransportPlan {
            layers: LayerSet::Explicit(vec![6]),
            ..Default::default()
        };
        assert!(matches!(bad.resolve(6, 32), Err(Error::Range(_))));
    }

    #[test]
    fn materialized_mask_is_outer_product() {
        let sel = ChannelSelection::explicit(vec![0, 2], ChannelCriterion::Top).unwrap();
        let m = make_indicator(&sel, 3, Polarity::KeepSelected).unwrap();
        let jm = JointMask::new(vec![false, true], m).unwrap();
        assert_eq!(jm.materialize().as_slice(), &[0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    fn engine() -> Engine {
        Engine::new(EngineConfig {
            depth: 3,
            width: 16,
            heads: 2,
            latent_h: 4,
            latent_w: 4,
            encoder_len: 4,
            steps: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn self_transport_is_noop() {
        let e = engine();
        let plan = TransportPlan {
            layers: LayerSet::All,
            encoder_k: 4,
            ..Default::default()
        };
        let r = run_transport(&e, &[1, 2, 3, 4], &[1, 2, 3, 4], &plan).unwrap();
        assert!(r.merged.final_latent.bit_eq(&r.target.final_latent));
        assert!(r.merged.final_latent.bit_eq(&r.source.final_latent));
    }

    #[test]
    fn missing_source_capture_is_an_intervention_error() {
        let e = engine();
        let source = e.sample(&[1, 2, 3, 4], &CaptureSpec::Nothing, &[]).unwrap();
        let plan = TransportPlan {
            layers: LayerSet::All,
            ..Default::default()
        };
        let err = merge_into(&e, &source, &[4, 3, 2, 1], &plan, &CaptureSpec::Nothing).unwrap_err();
        assert!(matches!(err, Error::Intervention { layer: 0, timestep: 0, .. }), "{err}");
    }

    #[test]
    fn sweep_identical_pair_has_zero_deltas() {
        let e = engine();
        let grid = TransportGrid {
            layers: vec![LayerSet::Regime(Regime::Middle), LayerSet::All],
            image_k: vec![0, 8, 16],
            encoder_k: vec![0, 2],
        };
        let rows = sweep_transport(&e, &[(vec![1, 2, 3, 4], vec![1, 2, 3, 4])], &grid, &TransportPlan::default()).unwrap();
        assert_eq!(rows.len(), 12);
        for r in rows {
            assert_eq!((r.delta_s, r.delta_t, r.delta_diff), (0.0, 0.0, 0.0));
        }
    }
}

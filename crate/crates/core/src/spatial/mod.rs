//! Spatial masks from massive channels.
//!
//! The image-stream activation is restricted to `k` selected channels and
//! clustered into two groups of tokens. Each token's score is the sum of
//! its min-max normalized restricted activations; the cluster with the
//! higher mean score becomes the foreground.

mod kmeans;
mod metrics;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans2, kmeans2_on, wcss, Clustering, DEFAULT_MAX_ITERS};
pub use metrics::{boundary_band, boundary_tokens, seg_metrics, SegMetrics, DEFAULT_BAND_RADIUS};

use crate::engine::{ActivationTensor, Stream};
use crate::error::{Error, Result};
use crate::stats::{channel_means, select_channels, ChannelCriterion, ChannelSelection};
use crate::tensor::Matrix;

/// Channel count used for mask extraction unless overridden.
pub const DEFAULT_MASK_K: usize = 12;

/// Image activations restricted to a channel selection (`N_I × k`).
#[derive(Debug, Clone, PartialEq)]
pub struct RestrictedActivations {
    /// Column `j` holds channel `channels.indices[j]`.
    pub data: Matrix,
    pub channels: ChannelSelection,
    pub grid: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedActivations {
    /// Every column rescaled to `[0, 1]`.
    pub data: Matrix,
    /// Constant columns, which are set to zero.
    pub degenerate_columns: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScores {
    /// Row sums of the normalized activations, each in `[0, k]`.
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskCriterion {
    /// Higher mean score is foreground.
    #[default]
    Max,
    /// Lower mean score is foreground.
    Min,
    /// Seeded coin flip.
    Random,
}

impl fmt::Display for MaskCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskCriterion::Max => "max",
            MaskCriterion::Min => "min",
            MaskCriterion::Random => "random",
        })
    }
}

impl FromStr for MaskCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Self::Max),
            "min" => Ok(Self::Min),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidArgument(format!("unknown mask criterion {other:?}"))),
        }
    }
}

/// Binary per-token foreground labelling of the image stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMask {
    pub p: Vec<bool>,
    pub foreground_score: f64,
    pub background_score: f64,
    pub criterion: MaskCriterion,
    pub grid: (usize, usize),
}

impl SpatialMask {
    pub fn foreground_count(&self) -> usize {
        self.p.iter().filter(|&&b| b).count()
    }

    /// Reshapes into `latent_h` rows of `latent_w` tokens.
    pub fn to_grid(&self) -> Vec<Vec<bool>> {
        self.p.chunks(self.grid.1.max(1)).map(<[bool]>::to_vec).collect()
    }
}

/// Column-gathers the selected channels of an image-stream activation.
pub fn restrict(x: &ActivationTensor, sel: &ChannelSelection, grid: (usize, usize)) -> Result<RestrictedActivations> {
    if x.stream != Stream::Image {
        return Err(Error::Stream {
            expected: Stream::Image,
            found: x.stream,
        });
    }
    if grid.0 * grid.1 != x.tokens() {
        return Err(Error::Shape(format!(
            "grid {}x{} does not match {} image tokens",
            grid.0,
            grid.1,
            x.tokens()
        )));
    }
    Ok(RestrictedActivations {
        data: x.data.gather_columns(&sel.indices)?,
        channels: sel.clone(),
        grid,
    })
}

/// Rescales every column to `[0, 1]`; constant columns become zero.
pub fn minmax_normalize(r: &RestrictedActivations) -> NormalizedActivations {
    let (rows, cols) = r.data.shape();
    let mut data = Matrix::zeros(rows, cols);
    let mut degenerate_columns = Vec::new();
    for c in 0..cols {
        let col = r.data.column(c);
        let min = col.iter().copied().fold(f32::INFINITY, f32::min);
        let max = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if rows == 0 || max == min {
            degenerate_columns.push(c);
            continue;
        }
        let (min, span) = (f64::from(min), f64::from(max) - f64::from(min));
        for (row, &v) in col.iter().enumerate() {
            data.set(row, c, ((f64::from(v) - min) / span) as f32);
        }
    }
    NormalizedActivations { data, degenerate_columns }
}

/// Per-token sum of normalized activations over the selected channels.
pub fn aggregate(norm: &NormalizedActivations) -> TokenScores {
    let s = (0..norm.data.rows())
        .map(|r| norm.data.row(r).iter().map(|&v| f64::from(v)).sum())
        .collect();
    TokenScores { s }
}

/// Mean score of each cluster.
pub fn cluster_scores(cl: &Clustering, s: &TokenScores) -> [f64; 2] {
    let mut sum = [0.0f64; 2];
    let mut count = [0usize; 2];
    for (&l, &v) in cl.labels.iter().zip(&s.s) {
        sum[l as usize] += v;
        count[l as usize] += 1;
    }
    [0, 1].map(|j| if count[j] == 0 { 0.0 } else { sum[j] / count[j] as f64 })
}

/// Picks the foreground cluster by `criterion`; equal means favour cluster
/// 0. `seed` drives the random criterion only.
pub fn assign_foreground(
    cl: &Clustering,
    s: &TokenScores,
    criterion: MaskCriterion,
    seed: u64,
    grid: (usize, usize),
) -> Result<SpatialMask> {
    if cl.labels.len() != s.s.len() {
        return Err(Error::Shape(format!("{} labels for {} scores", cl.labels.len(), s.s.len())));
    }
    if cl.size(0) == 0 || cl.size(1) == 0 {
        return Err(Error::DegenerateClustering("a cluster is empty".into()));
    }
    let means = cluster_scores(cl, s);
    let fg: u8 = match criterion {
        MaskCriterion::Max => u8::from(means[1] > means[0]),
        MaskCriterion::Min => u8::from(means[1] < means[0]),
        MaskCriterion::Random => u8::from(ChaCha8Rng::seed_from_u64(seed).random_bool(0.5)),
    };
    Ok(SpatialMask {
        p: cl.labels.iter().map(|&l| l == fg).collect(),
        foreground_score: means[fg as usize],
        background_score: means[1 - fg as usize],
        criterion,
        grid,
    })
}

/// Parameters of the end-to-end mask pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub k: usize,
    pub channel_criterion: ChannelCriterion,
    pub mask_criterion: MaskCriterion,
    /// Seed for random channel draws.
    pub channel_seed: u64,
    /// Seed for the random foreground coin.
    pub mask_seed: u64,
    /// Cluster the normalized features instead of the raw restricted ones.
    pub cluster_on_normalized: bool,
    pub max_iters: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            k: DEFAULT_MASK_K,
            channel_criterion: ChannelCriterion::Top,
            mask_criterion: MaskCriterion::Max,
            channel_seed: 0,
            mask_seed: 0,
            cluster_on_normalized: false,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

/// Every intermediate of one mask extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskExtraction {
    pub selection: ChannelSelection,
    pub restricted: RestrictedActivations,
    pub normalized: NormalizedActivations,
    pub scores: TokenScores,
    pub clustering: Clustering,
    pub mask: SpatialMask,
}

/// Runs selection, restriction, 2-means, normalization, aggregation and
/// foreground assignment on one image activation.
pub fn extract_mask_detailed(x: &ActivationTensor, grid: (usize, usize), spec: &MaskSpec) -> Result<MaskExtraction> {
    let score = channel_means(x)?;
    let seed = (spec.channel_criterion == ChannelCriterion::Random).then_some(spec.channel_seed);
    let selection = select_channels(&score, spec.k, spec.channel_criterion, seed)?;
    let restricted = restrict(x, &selection, grid)?;
    let normalized = minmax_normalize(&restricted);
    let scores = aggregate(&normalized);
    let features = if spec.cluster_on_normalized {
        &normalized.data
    } else {
        &restricted.data
    };
    let clustering = kmeans2_on(features, &scores.s, spec.max_iters)?;
    let mask = assign_foreground(&clustering, &scores, spec.mask_criterion, spec.mask_seed, grid)?;
    Ok(MaskExtraction {
        selection,
        restricted,
        normalized,
        scores,
        clustering,
        mask,
    })
}

pub fn extract_mask(x: &ActivationTensor, grid: (usize, usize), spec: &MaskSpec) -> Result<SpatialMask> {
    extract_mask_detailed(x, grid, spec).map(|e| e.mask)
}

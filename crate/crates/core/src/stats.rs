//! Per-sample channel statistics and top/bottom/random channel selection.
//!
//! Channel means are taken over the token axis of a single activation;
//! nothing is averaged across samples. Massive channels are the ones with
//! the largest absolute mean.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{ActivationTensor, Stream};
use crate::error::{Error, Result};

/// Channel means of one activation and their magnitudes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub layer: usize,
    pub stream: Stream,
    pub mu: Vec<f64>,
    /// `|mu[d]|`.
    pub score: Vec<f64>,
}

impl ChannelScore {
    /// Builds a score directly from magnitudes (used for synthetic inputs).
    pub fn from_scores(layer: usize, stream: Stream, score: Vec<f64>) -> Self {
        Self {
            layer,
            stream,
            mu: score.clone(),
            score,
        }
    }

    pub fn width(&self) -> usize {
        self.score.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelCriterion {
    /// The `k` largest scores.
    Top,
    /// The `k` smallest scores.
    Bottom,
    /// `k` channels drawn uniformly without replacement.
    Random,
}

impl fmt::Display for ChannelCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelCriterion::Top => "top",
            ChannelCriterion::Bottom => "bottom",
            ChannelCriterion::Random => "random",
        })
    }
}

impl FromStr for ChannelCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Self::Top),
            "bottom" => Ok(Self::Bottom),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidArgument(format!("unknown channel criterion {other:?}"))),
        }
    }
}

/// An ascending set of `k` distinct channel indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSelection {
    pub indices: Vec<usize>,
    pub k: usize,
    pub criterion: ChannelCriterion,
    /// Scores the selection was ranked by; absent for random draws.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<ChannelScore>,
}

impl ChannelSelection {
    /// Every channel of a `width`-wide activation, as a top-`width` selection.
    pub fn all(width: usize) -> Self {
        Self {
            indices: (0..width).collect(),
            k: width,
            criterion: ChannelCriterion::Top,
            source: None,
        }
    }

    /// Wraps explicit indices; they are sorted and must be distinct.
    pub fn explicit(mut indices: Vec<usize>, criterion: ChannelCriterion) -> Result<Self> {
        indices.sort_unstable();
        if indices.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument("duplicate channel index in selection".into()));
        }
        Ok(Self {
            k: indices.len(),
            indices,
            criterion,
            source: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// 1 on selected channels (the transport reading).
    KeepSelected,
    /// 0 on selected channels (the disruption reading).
    ZeroSelected,
}

/// Binary per-channel mask derived from a selection.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelIndicator {
    pub bits: Vec<bool>,
    pub polarity: Polarity,
}

impl ChannelIndicator {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// The same selection under the opposite polarity.
    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
            polarity: match self.polarity {
                Polarity::KeepSelected => Polarity::ZeroSelected,
                Polarity::ZeroSelected => Polarity::KeepSelected,
            },
        }
    }

    pub fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Mean of every channel over the token axis.
pub fn channel_means(x: &ActivationTensor) -> Result<ChannelScore> {
    let data = &x.data;
    if data.rows() == 0 {
        return Err(Error::EmptyInput(format!(
            "{} activation at layer {} has no tokens",
            x.stream, x.layer
        )));
    }
    let n = data.rows() as f64;
    let mut sums = vec![0.0f64; data.cols()];
    for r in 0..data.rows() {
        for (s, &v) in sums.iter_mut().zip(data.row(r)) {
            *s += f64::from(v);
        }
    }
    let mu: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    let score = mu.iter().map(|m| m.abs()).collect();
    Ok(ChannelScore {
        layer: x.layer,
        stream: x.stream,
        mu,
        score,
    })
}

/// Picks `k` channels by `criterion`. Ties rank the lower channel index
/// first. `seed` must be given exactly when the criterion is random.
pub fn select_channels(
    score: &ChannelScore,
    k: usize,
    criterion: ChannelCriterion,
    seed: Option<u64>,
) -> Result<ChannelSelection> {
    let d = score.width();
    if k > d {
        return Err(Error::Range(format!("k = {k} exceeds channel count {d}")));
    }
    let mut indices: Vec<usize> = match (criterion, seed) {
        (ChannelCriterion::Random, Some(seed)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rand::seq::index::sample(&mut rng, d, k).into_vec()
        }
        (ChannelCriterion::Random, None) => {
            return Err(Error::InvalidArgument("random channel selection requires a seed".into()))
        }
        (_, Some(_)) => {
            return Err(Error::InvalidArgument(format!(
                "{criterion} channel selection does not take a seed"
            )))
        }
        (ChannelCriterion::Top, None) => ranked(&score.score, k, true),
        (ChannelCriterion::Bottom, None) => ranked(&score.score, k, false),
    };
    indices.sort_unstable();
    Ok(ChannelSelection {
        indices,
        k,
        criterion,
        source: (criterion != ChannelCriterion::Random).then(|| score.clone()),
    })
}

/// First `k` channels of the ordering by score (descending when
/// `largest`), lower index first among equal scores.
fn ranked(score: &[f64], k: usize, largest: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..score.len()).collect();
    order.sort_by(|&a, &b| {
        let by_score = if largest {
            score[b].total_cmp(&score[a])
        } else {
            score[a].total_cmp(&score[b])
        };
        by_score.then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Expands a selection into a `width`-long binary mask.
pub fn make_indicator(sel: &ChannelSelection, width: usize, polarity: Polarity) -> Result<ChannelIndicator> {
    if let Some(&bad) = sel.indices.iter().find(|&&i| i >= width) {
        return Err(Error::Range(format!("channel {bad} out of range for width {width}")));
    }
    let selected_bit = polarity == Polarity::KeepSelected;
    let mut bits = vec![!selected_bit; width];
    for &i in &sel.indices {
        bits[i] = selected_bit;
    }
    Ok(ChannelIndicator { bits, polarity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    fn act(rows: &[&[f32]]) -> ActivationTensor {
        ActivationTensor::new(Stream::Image, 0, 0, Matrix::from_rows(rows).unwrap())
    }

    fn scores(v: &[f64]) -> ChannelScore {
        ChannelScore::from_scores(0, Stream::Image, v.to_vec())
    }

    #[test]
    fn zero_means() {
        let x = ActivationTensor::new(Stream::Image, 0, 0, Matrix::zeros(4, 3));
        assert_eq!(channel_means(&x).unwrap().mu, vec![0.0; 3]);
    }

    #[test]
    fn single_row_means() {
        let s = channel_means(&act(&[&[1.0, -2.0, 3.0]])).unwrap();
        assert_eq!(s.mu, vec![1.0, -2.0, 3.0]);
        assert_eq!(s.score, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn column_means() {
        let s = channel_means(&act(&[&[1.0, 2.0], &[3.0, 6.0]])).unwrap();
        assert_eq!(s.mu, vec![2.0, 4.0]);
    }

    #[test]
    fn empty_activation() {
        let x = ActivationTensor::new(Stream::Encoder, 0, 0, Matrix::zeros(0, 3));
        assert!(matches!(channel_means(&x), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn top_two_with_tie() {
        let sel = select_channels(&scores(&[0.5, 3.0, 3.0, 0.1]), 2, ChannelCriterion::Top, None).unwrap();
        assert_eq!(sel.indices, vec![1, 2]);
        // Tie at the cut: only one of the two 3.0 channels fits, the lower index wins.
        let sel = select_channels(&scores(&[0.5, 3.0, 3.0, 0.1]), 1, ChannelCriterion::Top, None).unwrap();
        assert_eq!(sel.indices, vec![1]);
        let sel = select_channels(&scores(&[2.0, 1.0, 1.0, 5.0]), 1, ChannelCriterion::Bottom, None).unwrap();
        assert_eq!(sel.indices, vec![1]);
    }

    #[test]
    fn full_selection_agrees() {
        let s = scores(&[0.3, 0.1, 0.9, 0.4]);
        let top = select_channels(&s, 4, ChannelCriterion::Top, None).unwrap();
        let bottom = select_channels(&s, 4, ChannelCriterion::Bottom, None).unwrap();
        assert_eq!(top.indices, vec![0, 1, 2, 3]);
        assert_eq!(top.indices, bottom.indices);
    }

    #[test]
    fn k_too_large() {
        assert!(matches!(
            select_channels(&scores(&[1.0, 2.0]), 3, ChannelCriterion::Top, None),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn random_requires_seed_only_when_random() {
        let s = scores(&[1.0, 2.0, 3.0]);
        assert!(select_channels(&s, 1, ChannelCriterion::Random, None).is_err());
        assert!(select_channels(&s, 1, ChannelCriterion::Top, Some(3)).is_err());
        let a = select_channels(&s, 2, ChannelCriterion::Random, Some(3)).unwrap();
        let b = select_channels(&s, 2, ChannelCriterion::Random, Some(3)).unwrap();
        assert_eq!(a.indices, b.indices);
        assert!(a.source.is_none());
        assert!(a.indices.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn indicator_polarities() {
        let sel = ChannelSelection::explicit(vec![3, 1], ChannelCriterion::Top).unwrap();
        let zero = make_indicator(&sel, 5, Polarity::ZeroSelected).unwrap();
        let keep = make_indicator(&sel, 5, Polarity::KeepSelected).unwrap();
        assert_eq!(zero.bits, vec![true, false, true, false, true]);
        assert_eq!(keep.bits, vec![false, true, false, true, false]);
        assert_eq!(zero.complement(), keep);
    }

    #[test]
    fn empty_selection_is_identity_disruption() {
        let sel = ChannelSelection::explicit(vec![], ChannelCriterion::Top).unwrap();
        let zero = make_indicator(&sel, 4, Polarity::ZeroSelected).unwrap();
        assert!(zero.bits.iter().all(|&b| b));
    }

    #[test]
    fn indicator_range() {
        let sel = ChannelSelection::explicit(vec![5], ChannelCriterion::Top).unwrap();
        assert!(matches!(make_indicator(&sel, 5, Polarity::KeepSelected), Err(Error::Range(_))));
    }

    #[test]
    fn selection_json_shape() {
        let s = channel_means(&act(&[&[1.0, -4.0, 2.0]])).unwrap();
        let sel = select_channels(&s, 1, ChannelCriterion::Top, None).unwrap();
        let json = serde_json::to_value(&sel).unwrap();
        assert_eq!(json["criterion"], "top");
        assert_eq!(json["indices"][0], 1);
        assert_eq!(json["source"]["stream"], "image");
        assert_eq!(json["source"]["score"][1], 4.0);
    }
}

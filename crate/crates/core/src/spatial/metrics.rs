//! Dichotomous segmentation metrics on the latent token grid.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BAND_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegMetrics {
    /// Foreground IoU.
    pub iou: f64,
    /// Mean of foreground and background IoU.
    pub miou: f64,
    /// Mean absolute error between the binary masks.
    pub mae: f64,
    /// Foreground IoU over tokens near a ground-truth boundary.
    pub biou: f64,
}

/// IoU of the tokens where `pred` and `gt` equal `class`, restricted to
/// `within`. A class absent from both masks scores 1.
fn class_iou(pred: &[bool], gt: &[bool], class: bool, within: impl Fn(usize) -> bool) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if !within(i) {
            continue;
        }
        let (p, g) = (p == class, g == class);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Ground-truth tokens with a 4-neighbour of the other class.
pub fn boundary_tokens(gt: &[bool], grid: (usize, usize)) -> Vec<bool> {
    let (h, w) = grid;
    let mut out = vec![false; gt.len()];
    for y in 0..h {
        for x in 0..w {
            let here = gt[y * w + x];
            let neighbours = [
                (y > 0).then(|| (y - 1) * w + x),
                (y + 1 < h).then(|| (y + 1) * w + x),
                (x > 0).then(|| y * w + x - 1),
                (x + 1 < w).then(|| y * w + x + 1),
            ];
            out[y * w + x] = neighbours.into_iter().flatten().any(|j| gt[j] != here);
        }
    }
    out
}

/// Tokens within Chebyshev distance `radius` of a ground-truth boundary token.
pub fn boundary_band(gt: &[bool], grid: (usize, usize), radius: usize) -> Vec<bool> {
    let (h, w) = grid;
    let boundary = boundary_tokens(gt, grid);
    let mut band = vec![false; gt.len()];
    for y in 0..h {
        for x in 0..w {
            if !boundary[y * w + x] {
                continue;
            }
            for yy in y.saturating_sub(radius)..=(y + radius).min(h - 1) {
                for xx in x.saturating_sub(radius)..=(x + radius).min(w - 1) {
                    band[yy * w + xx] = true;
                }
            }
        }
    }
    band
}

/// IoU, mIoU, MAE and boundary IoU of `pred` against `gt` on an
/// `h × w` grid (row-major).
pub fn seg_metrics(pred: &[bool], gt: &[bool], grid: (usize, usize), band_radius: usize) -> Result<SegMetrics> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!("mask has {} tokens, ground truth {}", pred.len(), gt.len())));
    }
    if grid.0 * grid.1 != gt.len() {
        return Err(Error::Shape(format!("grid {}x{} does not hold {} tokens", grid.0, grid.1, gt.len())));
    }
    let iou = class_iou(pred, gt, true, |_| true);
    let iou_bg = class_iou(pred, gt, false, |_| true);
    let mae = if gt.is_empty() {
        0.0
    } else {
        pred.iter().zip(gt).filter(|(p, g)| p != g).count() as f64 / gt.len() as f64
    };
    let band = boundary_band(gt, grid, band_radius);
    let biou = class_iou(pred, gt, true, |i| band[i]);
    Ok(SegMetrics {
        iou,
        miou: 0.5 * (iou + iou_bg),
        mae,
        biou,
    })
}

//! Two-cluster Lloyd iteration with a deterministic, seedless start.

use serde::{Deserialize, Serialize};

use super::{aggregate, minmax_normalize, RestrictedActivations};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const DEFAULT_MAX_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    /// Cluster id (0 or 1) of every token.
    pub labels: Vec<u8>,
    /// Mean of each cluster, `2 × k`.
    pub centroids: [Vec<f64>; 2],
    /// Lloyd iterations performed.
    pub iterations: usize,
    /// Within-cluster sum of squares of the final partition.
    pub objective: f64,
    /// Objective of the partition after every iteration, starting with
    /// the initial assignment. Non-increasing.
    pub history: Vec<f64>,
}

impl Clustering {
    pub fn members(&self, cluster: u8) -> impl Iterator<Item = usize> + '_ {
        self.labels.iter().enumerate().filter(move |(_, &l)| l == cluster).map(|(i, _)| i)
    }

    pub fn size(&self, cluster: u8) -> usize {
        self.labels.iter().filter(|&&l| l == cluster).count()
    }

    /// The same partition with cluster ids 0 and 1 exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            labels: self.labels.iter().map(|l| 1 - l).collect(),
            centroids: [self.centroids[1].clone(), self.centroids[0].clone()],
            ..self.clone()
        }
    }
}

/// 2-means over the rows of the restricted activations, started from the
/// rows with the lowest and highest aggregate normalized score.
pub fn kmeans2(r: &RestrictedActivations, max_iters: usize) -> Result<Clustering> {
    let scores = aggregate(&minmax_normalize(r)).s;
    kmeans2_on(&r.data, &scores, max_iters)
}

/// 2-means over the rows of `data`. `init_scores` ranks rows for
/// initialization: centroid 0 starts at the lowest-scoring row and
/// centroid 1 at the highest-scoring row, ties going to the lower index.
/// If those rows coincide, centroid 1 starts at the row farthest from
/// centroid 0 instead.
pub fn kmeans2_on(data: &Matrix, init_scores: &[f64], max_iters: usize) -> Result<Clustering> {
    let n = data.rows();
    if n < 2 {
        return Err(Error::DegenerateClustering(format!("need at least 2 tokens, got {n}")));
    }
    if init_scores.len() != n {
        return Err(Error::Shape(format!("{} init scores for {n} tokens", init_scores.len())));
    }
    let points: Vec<Vec<f64>> = (0..n).map(|i| data.row(i).iter().map(|&v| f64::from(v)).collect()).collect();
    if points.iter().all(|p| *p == points[0]) {
        return Err(Error::DegenerateClustering("all token vectors are identical".into()));
    }

    let lo = argbest(init_scores, |a, b| a < b);
    let hi = argbest(init_scores, |a, b| a > b);
    let hi = if points[lo] == points[hi] {
        argbest(&points.iter().map(|p| sq_dist(p, &points[lo])).collect::<Vec<_>>(), |a, b| a > b)
    } else {
        hi
    };
    let mut centroids = [points[lo].clone(), points[hi].clone()];

    let mut labels = assign(&points, &centroids);
    repair_empty(&points, &mut labels);
    let mut history = vec![wcss(&points, &labels)];
    let mut iterations = 0;

    while iterations < max_iters {
        iterations += 1;
        centroids = means(&points, &labels);
        let mut next = assign(&points, &centroids);
        repair_empty(&points, &mut next);
        if next == labels {
            break;
        }
        labels = next;
        history.push(wcss(&points, &labels));
    }
    centroids = means(&points, &labels);
    let objective = *history.last().expect("history starts non-empty");
    Ok(Clustering {
        labels,
        centroids,
        iterations,
        objective,
        history,
    })
}

/// First index whose value beats every other under `better`.
fn argbest(values: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if better(v, values[best]) {
            best = i;
        }
    }
    best
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point; equal distances go to cluster 0.
fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>; 2]) -> Vec<u8> {
    points
        .iter()
        .map(|p| u8::from(sq_dist(p, &centroids[1]) < sq_dist(p, &centroids[0])))
        .collect()
}

fn means(points: &[Vec<f64>], labels: &[u8]) -> [Vec<f64>; 2] {
    let dim = points[0].len();
    let mut sums = [vec![0.0; dim], vec![0.0; dim]];
    let mut counts = [0usize; 2];
    for (p, &l) in points.iter().zip(labels) {
        counts[l as usize] += 1;
        for (s, v) in sums[l as usize].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    sums
}

/// Within-cluster sum of squares about each cluster's own mean.
pub fn wcss(points: &[Vec<f64>], labels: &[u8]) -> f64 {
    let c = means(points, labels);
    points.iter().zip(labels).map(|(p, &l)| sq_dist(p, &c[l as usize])).sum()
}

/// If one cluster is empty, moves the point farthest from the other
/// cluster's mean into it.
fn repair_empty(points: &[Vec<f64>], labels: &mut [u8]) {
    for empty in [0u8, 1u8] {
        if labels.iter().all(|&l| l != empty) {
            let c = means(points, labels);
            let other = 1 - empty;
            let dists: Vec<f64> = points.iter().map(|p| sq_dist(p, &c[other as usize])).collect();
            let far = argbest(&dists, |a, b| a > b);
            labels[far] = empty;
        }
    }
}

//! Corner extraction, descriptor matching and fundamental-matrix verification.

mod extract;
mod ransac;

use rayon::prelude::*;
use thiserror::Error;

use crate::FrameId;

pub use extract::{extract_features, harris_response, ExtractConfig, GrayImage};
pub use ransac::{fundamental_eight_point, verify_fundamental, RansacConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("descriptor dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("need at least 8 matches, got {0}")]
    InsufficientMatches(usize),
    #[error("best consensus has only {0} inliers")]
    NoConsensus(usize),
    #[error("image error: {0}")]
    Image(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub response: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, response: 0.0 }
    }

    pub fn pixel(&self) -> nalgebra::Vector2<f64> {
        nalgebra::Vector2::new(self.x, self.y)
    }
}

/// Keypoints of one frame with unit-norm descriptors stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub frame_id: FrameId,
    pub keypoints: Vec<Keypoint>,
    pub dim: usize,
    pub descriptors: Vec<f64>,
}

impl FeatureSet {
    pub fn empty(frame_id: FrameId, dim: usize) -> Self {
        Self {
            frame_id,
            keypoints: Vec::new(),
            dim,
            descriptors: Vec::new(),
        }
    }

    /// Normalizes each descriptor to unit length. Zero descriptors are rejected.
    pub fn new(
        frame_id: FrameId,
        keypoints: Vec<Keypoint>,
        dim: usize,
        mut descriptors: Vec<f64>,
    ) -> Result<Self, FeatureError> {
        if descriptors.len() != keypoints.len() * dim {
            return Err(FeatureError::DimensionMismatch(descriptors.len(), keypoints.len() * dim));
        }
        if dim > 0 {
            for row in descriptors.chunks_mut(dim) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    row.iter_mut().for_each(|v| *v /= n);
                }
            }
        }
        Ok(Self {
            frame_id,
            keypoints,
            dim,
            descriptors,
        })
    }

    pub fn len(&self) -> usize {
        self.keypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keypoints.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f64] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn descriptor_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact on an empty slice with dim 0 would panic, so guard it
        self.descriptors.chunks_exact(self.dim.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub index_a: usize,
    pub index_b: usize,
    pub distance: f64,
}

pub fn descriptor_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Best and second-best neighbour of each row of `a` among rows of `b`.
/// Ties in distance go to the lower index.
fn nearest_two(a: &FeatureSet, b: &FeatureSet) -> Vec<(usize, f64, f64)> {
    (0..a.len())
        .into_par_iter()
        .map(|i| {
            let da = a.descriptor(i);
            let mut best = (usize::MAX, f64::INFINITY);
            let mut second = f64::INFINITY;
            for j in 0..b.len() {
                let d = descriptor_distance(da, b.descriptor(j));
                if d < best.1 {
                    second = best.1;
                    best = (j, d);
                } else if d < second {
                    second = d;
                }
            }
            (best.0, best.1, second)
        })
        .collect()
}

/// Mutual nearest neighbours that pass the ratio test in both directions
/// (`best < ratio * second_best`), sorted by `index_a`.
pub fn match_features(a: &FeatureSet, b: &FeatureSet, ratio: f64) -> Result<Vec<Match>, FeatureError> {
    if a.dim != b.dim && !a.is_empty() && !b.is_empty() {
        return Err(FeatureError::DimensionMismatch(a.dim, b.dim));
    }
    if a.is_empty() || b.is_empty() {
        return Ok(Vec::new());
    }
    let forward = nearest_two(a, b);
    let backward = nearest_two(b, a);
    let mut out = Vec::new();
    for (i, &(j, d, second)) in forward.iter().enumerate() {
        let (back, _, back_second) = backward[j];
        if back != i {
            continue;
        }
        if d < ratio * second && d < ratio * back_second {
            out.push(Match {
                index_a: i,
                index_b: j,
                distance: d,
            });
        }
    }
    Ok(out)
}

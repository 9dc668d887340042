use nalgebra::{DMatrix, Matrix3, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FeatureError, Keypoint, Match};
use crate::geometry::point_line_distance;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    /// Inlier threshold on the point-to-epipolar-line distance in both images.
    pub threshold_px: f64,
    pub max_iters: usize,
    pub seed: u64,
    /// Early exit once this confidence of having drawn an all-inlier sample is reached.
    pub confidence: f64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold_px: 2.0,
            max_iters: 1000,
            seed: 42,
            confidence: 0.999,
        }
    }
}

/// Similarity that moves the centroid to the origin and the mean distance to sqrt(2).
fn normalizing_transform(pts: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let c = pts.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean = pts.iter().map(|p| (p - c).norm()).sum::<f64>() / n;
    let s = if mean > 1e-12 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// Normalized eight-point estimate of `F` with `x_b^T F x_a = 0`, rank 2 and
/// unit Frobenius norm.
pub fn fundamental_eight_point(a: &[Vector2<f64>], b: &[Vector2<f64>]) -> Option<Matrix3<f64>> {
    let n = a.len();
    if n < 8 || b.len() != n {
        return None;
    }
    let ta = normalizing_transform(a);
    let tb = normalizing_transform(b);
    let mut m = DMatrix::<f64>::zeros(n.max(9), 9);
    for i in 0..n {
        let pa = ta * Vector3::new(a[i].x, a[i].y, 1.0);
        let pb = tb * Vector3::new(b[i].x, b[i].y, 1.0);
        for r in 0..3 {
            for c in 0..3 {
                m[(i, 3 * r + c)] = pb[r] * pa[c];
            }
        }
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t?;
    let (k, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let f = Matrix3::from_fn(|r, c| vt[(k, 3 * r + c)]);
    let mut svd = f.svd(true, true);
    svd.singular_values[2] = 0.0;
    let f = svd.recompose().ok()?;
    let f = tb.transpose() * f * ta;
    let norm = f.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return None;
    }
    let f = f / norm;
    // re-impose rank 2 after denormalization to keep the ratio at round-off level
    let mut svd = f.svd(true, true);
    svd.singular_values[2] = 0.0;
    svd.recompose().ok()
}

fn is_inlier(f: &Matrix3<f64>, a: &Vector2<f64>, b: &Vector2<f64>, threshold: f64) -> bool {
    let xa = Vector3::new(a.x, a.y, 1.0);
    let xb = Vector3::new(b.x, b.y, 1.0);
    let (Ok(db), Ok(da)) = (point_line_distance(&xb, &(f * xa)), point_line_distance(&xa, &(f.transpose() * xb)))
    else {
        return false;
    };
    db.abs() < threshold && da.abs() < threshold
}

fn inlier_mask(f: &Matrix3<f64>, a: &[Vector2<f64>], b: &[Vector2<f64>], threshold: f64) -> Vec<bool> {
    a.iter().zip(b).map(|(pa, pb)| is_inlier(f, pa, pb, threshold)).collect()
}

/// RANSAC over the normalized eight-point solver followed by a refit on the
/// consensus set. Returns the inlier mask aligned with `matches` and `F`
/// satisfying `x_b^T F x_a = 0`.
pub fn verify_fundamental(
    matches: &[Match],
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    config: &RansacConfig,
) -> Result<(Vec<bool>, Matrix3<f64>), FeatureError> {
    let n = matches.len();
    if n < 8 {
        return Err(FeatureError::InsufficientMatches(n));
    }
    let a: Vec<Vector2<f64>> = matches.iter().map(|m| kps_a[m.index_a].pixel()).collect();
    let b: Vec<Vector2<f64>> = matches.iter().map(|m| kps_b[m.index_b].pixel()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    let mut needed = config.max_iters;
    let mut iter = 0;
    while iter < needed.min(config.max_iters) {
        iter += 1;
        let sample = rand::seq::index::sample(&mut rng, n, 8);
        let sa: Vec<_> = sample.iter().map(|i| a[i]).collect();
        let sb: Vec<_> = sample.iter().map(|i| b[i]).collect();
        let Some(f) = fundamental_eight_point(&sa, &sb) else {
            continue;
        };
        let count = inlier_mask(&f, &a, &b, config.threshold_px).iter().filter(|&&x| x).count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, f));
            let w = count as f64 / n as f64;
            let p_good = w.powi(8);
            needed = if p_good >= 1.0 - 1e-12 {
                iter
            } else if p_good <= 0.0 {
                config.max_iters
            } else {
                let k = ((1.0 - config.confidence).ln() / (-p_good).ln_1p()).ceil();
                if k.is_finite() && k >= 1.0 {
                    (k as usize).min(config.max_iters)
                } else {
                    config.max_iters
                }
            };
        }
    }
    let Some((count, mut f)) = best else {
        return Err(FeatureError::NoConsensus(0));
    };
    if count < 8 {
        return Err(FeatureError::NoConsensus(count));
    }
    let mut mask = inlier_mask(&f, &a, &b, config.threshold_px);
    let ia: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| a[i]).collect();
    let ib: Vec<_> = (0..n).filter(|&i| mask[i]).map(|i| b[i]).collect();
    if let Some(refit) = fundamental_eight_point(&ia, &ib) {
        let refit_mask = inlier_mask(&refit, &a, &b, config.threshold_px);
        if refit_mask.iter().filter(|&&x| x).count() >= count {
            f = refit;
            mask = refit_mask;
        }
    }
    Ok((mask, f))
}

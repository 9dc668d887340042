use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub(crate) const MAX_ITERS: usize = 25;
pub(crate) const REL_TOL: f64 = 1e-6;

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center, ties to the lower index.
pub(crate) fn nearest(x: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Draws an index with probability proportional to `mass`, or `None` if all mass is zero.
fn draw(rng: &mut ChaCha8Rng, mass: &[f64]) -> Option<usize> {
    let total: f64 = mass.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let r = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &m) in mass.iter().enumerate() {
        if m <= 0.0 {
            continue;
        }
        acc += m;
        last = Some(i);
        if r < acc {
            return Some(i);
        }
    }
    last
}

/// Weighted k-means with k-means++ seeding.
///
/// Returns the centers that kept at least one point and the assignment of
/// every point to them. Fewer than `k` centers come back when the points have
/// fewer than `k` distinct positions.
pub(crate) fn weighted_kmeans(
    points: &[&[f64]],
    weights: &[f64],
    k: usize,
    seed: u64,
) -> (Vec<Vec<f64>>, Vec<usize>) {
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = draw(&mut rng, weights).unwrap_or(0);
    centers.push(points[first].to_vec());
    let mut d2: Vec<f64> = points.par_iter().map(|p| sq_dist(p, &centers[0])).collect();
    while centers.len() < k {
        let mass: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
        let Some(next) = draw(&mut rng, &mass) else {
            break;
        };
        centers.push(points[next].to_vec());
        let c = centers.last().unwrap();
        d2.par_iter_mut()
            .zip(points.par_iter())
            .for_each(|(d, p)| *d = d.min(sq_dist(p, c)));
    }

    let dim = points.first().map_or(0, |p| p.len());
    let mut assign = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..MAX_ITERS {
        let nearest_all: Vec<(usize, f64)> = points.par_iter().map(|p| nearest(p, &centers)).collect();
        let mut inertia = 0.0;
        for (i, &(c, d)) in nearest_all.iter().enumerate() {
            assign[i] = c;
            inertia += weights[i] * d;
        }
        let mut sums = vec![vec![0.0; dim]; centers.len()];
        let mut mass = vec![0.0; centers.len()];
        for i in 0..n {
            let c = assign[i];
            mass[c] += weights[i];
            for (s, x) in sums[c].iter_mut().zip(points[i]) {
                *s += weights[i] * x;
            }
        }
        for c in 0..centers.len() {
            if mass[c] > 0.0 {
                centers[c] = sums[c].iter().map(|s| s / mass[c]).collect();
            }
        }
        let converged = prev_inertia.is_finite() && (prev_inertia - inertia).abs() <= REL_TOL * prev_inertia.max(1e-300);
        prev_inertia = inertia;
        if converged || inertia == 0.0 {
            break;
        }
    }
    for (i, p) in points.iter().enumerate() {
        assign[i] = nearest(p, &centers).0;
    }
    // drop empty clusters, keeping order
    let mut used = vec![false; centers.len()];
    for &a in &assign {
        used[a] = true;
    }
    let mut remap = vec![usize::MAX; centers.len()];
    let mut kept = Vec::new();
    for (c, center) in centers.into_iter().enumerate() {
        if used[c] {
            remap[c] = kept.len();
            kept.push(center);
        }
    }
    for a in assign.iter_mut() {
        *a = remap[*a];
    }
    (kept, assign)
}

/// Weighted sum of squared distances to the nearest of `centers`.
pub fn quantization_error(points: &[&[f64]], weights: &[f64], centers: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(weights)
        .map(|(p, w)| w * nearest(p, centers).1)
        .sum()
}

use std::cell::Cell;

use nalgebra::{DMatrix, Matrix3, Matrix4, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::MappingError;
use crate::geometry::{skew, unproject, CameraModel, Pose};

thread_local! {
    static TRIANGULATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of triangulations run on the current thread. Lets callers assert
/// that a code path never builds landmarks.
pub fn triangulation_count() -> u64 {
    TRIANGULATIONS.with(|c| c.get())
}

fn bump() {
    TRIANGULATIONS.with(|c| c.set(c.get() + 1));
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TriangulationMethod {
    Dlt,
    Midpoint,
}

/// One view of a point: the unit ray in camera coordinates and the
/// world-to-camera pose it was observed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayObservation {
    pub ray: Vector3<f64>,
    pub pose: Pose,
}

impl RayObservation {
    pub fn from_pixel(camera: &CameraModel, pose: &Pose, pixel: &Vector2<f64>) -> Result<Self, MappingError> {
        Ok(Self {
            ray: unproject(camera, pixel)?.normalize(),
            pose: *pose,
        })
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }

    /// Ray direction in world coordinates.
    pub fn world_direction(&self) -> Vector3<f64> {
        self.pose.rotation_matrix().transpose() * self.ray
    }
}

/// Largest angle between any two world-frame rays.
pub fn max_ray_angle(obs: &[RayObservation]) -> f64 {
    let dirs: Vec<Vector3<f64>> = obs.iter().map(|o| o.world_direction()).collect();
    let mut best = 0.0f64;
    for i in 0..dirs.len() {
        for j in i + 1..dirs.len() {
            best = best.max(dirs[i].cross(&dirs[j]).norm().atan2(dirs[i].dot(&dirs[j])));
        }
    }
    best
}

fn check_cheirality(x: &Vector3<f64>, obs: &[RayObservation]) -> Result<(), MappingError> {
    for o in obs {
        if o.pose.transform_point(x).dot(&o.ray) <= 1e-9 {
            return Err(MappingError::CheiralityViolation);
        }
    }
    Ok(())
}

/// Linear triangulation from `ray x (R X + t) = 0` for every view; works on
/// rays, so any camera model with an unprojection is supported.
pub fn triangulate_dlt(obs: &[RayObservation], min_angle: f64) -> Result<Vector3<f64>, MappingError> {
    if obs.len() < 2 {
        return Err(MappingError::InsufficientObservations(obs.len()));
    }
    bump();
    if max_ray_angle(obs) < min_angle {
        return Err(MappingError::InsufficientParallax);
    }
    let mut a = DMatrix::<f64>::zeros(3 * obs.len(), 4);
    for (i, o) in obs.iter().enumerate() {
        let mut p = nalgebra::Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&o.pose.rotation_matrix());
        p.fixed_view_mut::<3, 1>(0, 3).copy_from(o.pose.translation());
        let rows = skew(&o.ray) * p;
        a.view_mut((3 * i, 0), (3, 4)).copy_from(&rows);
    }
    // the 4x4 normal matrix has the same smallest singular vector and keeps the SVD small
    let ata: Matrix4<f64> = (a.transpose() * &a).fixed_view::<4, 4>(0, 0).into_owned();
    let eig = ata.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let h = eig.eigenvectors.column(k);
    if h[3].abs() < 1e-14 * h.norm() {
        return Err(MappingError::InsufficientParallax);
    }
    let x = Vector3::new(h[0], h[1], h[2]) / h[3];
    check_cheirality(&x, obs)?;
    Ok(x)
}

/// Point minimizing the summed squared distances to all rays.
pub fn triangulate_midpoint(obs: &[RayObservation]) -> Result<Vector3<f64>, MappingError> {
    if obs.len() < 2 {
        return Err(MappingError::InsufficientObservations(obs.len()));
    }
    bump();
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for o in obs {
        let d = o.world_direction().normalize();
        let p = Matrix3::identity() - d * d.transpose();
        a += p;
        b += p * o.center();
    }
    let eig = a.symmetric_eigen();
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    if lo <= 0.0 || hi / lo > 1e10 {
        return Err(MappingError::ParallelRays);
    }
    let x = eig.eigenvectors * Matrix3::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v)) * eig.eigenvectors.transpose() * b;
    check_cheirality(&x, obs)?;
    Ok(x)
}

pub fn triangulate(obs: &[RayObservation], method: TriangulationMethod, min_angle: f64) -> Result<Vector3<f64>, MappingError> {
    match method {
        TriangulationMethod::Dlt => triangulate_dlt(obs, min_angle),
        TriangulationMethod::Midpoint => {
            if max_ray_angle(obs) < min_angle {
                bump();
                return Err(MappingError::InsufficientParallax);
            }
            triangulate_midpoint(obs)
        }
    }
}

/// A view for robust triangulation: ray observation plus the pixel and
/// camera used to score reprojection.
#[derive(Debug, Clone, Copy)]
pub struct PixelView<'a> {
    pub obs: RayObservation,
    pub camera: &'a CameraModel,
    pub pixel: Vector2<f64>,
}

pub fn reprojection_error(v: &PixelView, x: &Vector3<f64>) -> f64 {
    match v.camera.project(&v.obs.pose, x) {
        Ok(p) if v.obs.pose.transform_point(x).dot(&v.obs.ray) > 0.0 => (p - v.pixel).norm(),
        _ => f64::INFINITY,
    }
}

/// Pair-sampled RANSAC: triangulate from two views, score by reprojection
/// inliers, refit on the best consensus. All pairs are tried for short
/// tracks, a seeded sample of pairs otherwise.
pub fn ransac_triangulate(
    views: &[PixelView],
    threshold_px: f64,
    min_angle: f64,
    method: TriangulationMethod,
    seed: u64,
) -> Option<(Vector3<f64>, Vec<bool>)> {
    let n = views.len();
    if n < 2 {
        return None;
    }
    const MAX_PAIRS: usize = 64;
    let mut pairs = Vec::new();
    if n * (n - 1) / 2 <= MAX_PAIRS {
        for i in 0..n {
            for j in i + 1..n {
                pairs.push((i, j));
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..MAX_PAIRS {
            let s = rand::seq::index::sample(&mut rng, n, 2);
            pairs.push((s.index(0).min(s.index(1)), s.index(0).max(s.index(1))));
        }
    }
    let score = |x: &Vector3<f64>| -> (Vec<bool>, usize, f64) {
        let mut mask = vec![false; n];
        let mut err = 0.0;
        for (i, v) in views.iter().enumerate() {
            let e = reprojection_error(v, x);
            if e < threshold_px {
                mask[i] = true;
                err += e;
            }
        }
        let c = mask.iter().filter(|&&m| m).count();
        (mask, c, err)
    };
    let mut best: Option<(Vector3<f64>, Vec<bool>, usize, f64)> = None;
    for (i, j) in pairs {
        let Ok(x) = triangulate(&[views[i].obs, views[j].obs], method, min_angle) else {
            continue;
        };
        let (mask, c, err) = score(&x);
        let better = match &best {
            None => true,
            Some((_, _, bc, be)) => c > *bc || (c == *bc && err < *be),
        };
        if better {
            best = Some((x, mask, c, err));
        }
    }
    let (mut x, mut mask, mut count, _) = best?;
    if count < 2 {
        return None;
    }
    for _ in 0..3 {
        let inl: Vec<RayObservation> = (0..n).filter(|&i| mask[i]).map(|i| views[i].obs).collect();
        let Ok(refit) = triangulate(&inl, method, min_angle) else {
            break;
        };
        let (m2, c2, _) = score(&refit);
        if c2 < count {
            break;
        }
        let same = m2 == mask;
        x = refit;
        mask = m2;
        count = c2;
        if same {
            break;
        }
    }
    let inl: Vec<RayObservation> = (0..n).filter(|&i| mask[i]).map(|i| views[i].obs).collect();
    if max_ray_angle(&inl) < min_angle {
        return None;
    }
    Some((x, mask))
}

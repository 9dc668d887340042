//! Metric relative pose between a calibrated stereo pair and a map frame
//! from 2D matches only: two-view checks, scale fit, joint Sampson refinement.

use std::fmt;

use nalgebra::{DMatrix, DVector, Matrix2x6, Matrix3, Matrix3x2, Vector2, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::features::{match_features, FeatureSet, Match, RansacConfig};
use crate::geometry::{
    decompose_essential, epipolar_eight_point, essential_eight_point, essential_unnormalized, homogenize, skew, unproject, CameraModel, Correspondence,
    GeometryError, Pose,
};
use crate::solver::{CostFunction, Evaluation, Problem, RobustLoss, SolverError, SolverOptions};

/// Median rotation-compensated ray angle below which motion counts as pure rotation.
pub const MIN_PARALLAX_DEG: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    LeftMap,
    MapRight,
    Scale,
    Refine,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::LeftMap => "left-map",
            Stage::MapRight => "map-right",
            Stage::Scale => "scale",
            Stage::Refine => "refine",
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelPoseError {
    #[error("need at least 8 matches, got {0}")]
    InsufficientMatches(usize),
    #[error("no essential-matrix consensus ({0} inliers)")]
    NoConsensus(usize),
    #[error("degenerate motion: median parallax {0:.4} deg")]
    DegenerateMotion(f64),
    #[error("calibration baseline is too short")]
    ZeroBaseline,
    #[error("scale system is ill-conditioned (condition {0:e})")]
    IllConditioned(f64),
    #[error("negative translation scale ({0}, {1})")]
    NegativeScale(f64, f64),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("{stage}: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: Box<RelPoseError>,
    },
}

impl RelPoseError {
    fn at(self, stage: Stage) -> Self {
        RelPoseError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The error with any stage tag removed.
    pub fn root(&self) -> &RelPoseError {
        match self {
            RelPoseError::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            RelPoseError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }
}

/// A frame seen through its camera model.
#[derive(Debug, Clone, Copy)]
pub struct View<'a> {
    pub camera: &'a CameraModel,
    pub features: &'a FeatureSet,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoViewParams {
    pub ratio: f64,
    /// `threshold_px` is converted to normalized units with each camera's focal length.
    pub ransac: RansacConfig,
    pub min_parallax_deg: f64,
}

impl Default for TwoViewParams {
    fn default() -> Self {
        Self {
            ratio: 0.8,
            ransac: RansacConfig::default(),
            min_parallax_deg: MIN_PARALLAX_DEG,
        }
    }
}

/// Relative rotation and unit translation `T_a^b` (b coordinates into a).
#[derive(Debug, Clone, PartialEq)]
pub struct TwoViewResult {
    pub rotation: Matrix3<f64>,
    pub direction: Vector3<f64>,
    pub essential: Matrix3<f64>,
    /// Inlier matches, `index_a` in view a.
    pub inliers: Vec<Match>,
    /// Inlier rays with `source` in view b and `target` in view a.
    pub correspondences: Vec<Correspondence>,
    pub median_parallax_deg: f64,
}

impl TwoViewResult {
    pub fn unit_pose(&self) -> Pose {
        Pose::from_matrix_parts(&self.rotation, self.direction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativePoseEstimate {
    /// `T_left^map`.
    pub pose: Pose,
    pub scale_left: f64,
    pub scale_right: f64,
    /// Final joint Sampson cost.
    pub residual: f64,
    pub initial_residual: f64,
}

fn inlier_flags(e: &Matrix3<f64>, corr: &[Correspondence], thr_src: f64, thr_tgt: f64) -> Vec<bool> {
    corr.iter()
        .map(|c| {
            let x = homogenize(&c.source);
            let xp = homogenize(&c.target);
            let ls = e.transpose() * xp;
            let lt = e * x;
            let ns = ls.x.hypot(ls.y);
            let nt = lt.x.hypot(lt.y);
            if !(ns > 0.0 && nt > 0.0) {
                return false;
            }
            let num = xp.dot(&(e * x));
            (num / ns).abs() < thr_src && (num / nt).abs() < thr_tgt
        })
        .collect()
}

fn angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b)).to_degrees()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rotation best aligning `source` rays onto `target` rays.
fn kabsch(corr: &[Correspondence]) -> Matrix3<f64> {
    let mut m = Matrix3::zeros();
    for c in corr {
        m += c.target.normalize() * c.source.normalize().transpose();
    }
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * vt).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * vt
}

fn median_parallax(r: &Matrix3<f64>, corr: &[Correspondence]) -> f64 {
    median(corr.iter().map(|c| angle_deg(&c.target, &(r * c.source))).collect())
}

/// Rays for matched keypoints; matches whose rays point backwards in either
/// view cannot be homogenized and are dropped.
fn match_rays(a: &View, b: &View, matches: &[Match]) -> Result<(Vec<Match>, Vec<Correspondence>), RelPoseError> {
    let mut kept = Vec::new();
    let mut corr = Vec::new();
    for m in matches {
        let ra = unproject(a.camera, &a.features.keypoints[m.index_a].pixel())?;
        let rb = unproject(b.camera, &b.features.keypoints[m.index_b].pixel())?;
        if ra.z > 1e-6 && rb.z > 1e-6 {
            kept.push(*m);
            corr.push(Correspondence::new(rb, ra));
        }
    }
    Ok((kept, corr))
}

/// Essential-matrix RANSAC and cheirality decomposition for given matches.
pub fn two_view_from_matches(
    a: &View,
    b: &View,
    matches: &[Match],
    params: &TwoViewParams,
) -> Result<TwoViewResult, RelPoseError> {
    if matches.len() < 8 {
        return Err(RelPoseError::InsufficientMatches(matches.len()));
    }
    let (matches, corr) = match_rays(a, b, matches)?;
    let n = corr.len();
    if n < 8 {
        return Err(RelPoseError::InsufficientMatches(n));
    }
    let thr_src = params.ransac.threshold_px / b.camera.focal();
    let thr_tgt = params.ransac.threshold_px / a.camera.focal();
    let count = |flags: &[bool]| flags.iter().filter(|&&x| x).count();

    let mut rng = ChaCha8Rng::seed_from_u64(params.ransac.seed);
    let mut best: Option<(usize, Matrix3<f64>)> = None;
    let mut needed = params.ransac.max_iters;
    let mut iter = 0;
    while iter < needed.min(params.ransac.max_iters) {
        iter += 1;
        let sample: Vec<Correspondence> = rand::seq::index::sample(&mut rng, n, 8).iter().map(|i| corr[i]).collect();
        let Ok(e) = epipolar_eight_point(&sample) else {
            continue;
        };
        let c = count(&inlier_flags(&e, &corr, thr_src, thr_tgt));
        if best.as_ref().is_none_or(|(bc, _)| c > *bc) {
            best = Some((c, e));
            let p_good = (c as f64 / n as f64).powi(8);
            needed = if p_good >= 1.0 - 1e-12 {
                iter
            } else if p_good <= 0.0 {
                params.ransac.max_iters
            } else {
                let k = ((1.0 - params.ransac.confidence).ln() / (-p_good).ln_1p()).ceil();
                if k.is_finite() && k >= 1.0 {
                    (k as usize).min(params.ransac.max_iters)
                } else {
                    params.ransac.max_iters
                }
            };
        }
    }
    let Some((best_count, e)) = best else {
        return Err(RelPoseError::NoConsensus(0));
    };
    if best_count < 8 {
        return Err(RelPoseError::NoConsensus(best_count));
    }
    let mut flags = inlier_flags(&e, &corr, thr_src, thr_tgt);
    let mut inl: Vec<Correspondence> = (0..n).filter(|&i| flags[i]).map(|i| corr[i]).collect();

    // pure rotation: rays align after the best rotation alone
    let rot_only = median_parallax(&kabsch(&inl), &inl);
    if rot_only < params.min_parallax_deg {
        return Err(RelPoseError::DegenerateMotion(rot_only));
    }

    // essential fit on the consensus set, then nonlinear refinement of (R, t)
    // on the epipolar distances, re-gating until the inlier set settles
    let e = essential_eight_point(&inl)?;
    let (r, t) = decompose_essential(&e, &inl)?;
    let mut rel = Pose::from_matrix_parts(&r, t);
    let thr = thr_src.max(thr_tgt);
    for _ in 0..4 {
        rel = refine_epipolar(&rel, &inl, thr)?;
        let e = essential_unnormalized(&rel);
        let next = inlier_flags(&e, &corr, thr_src, thr_tgt);
        let changed = next != flags;
        flags = next;
        inl = (0..n).filter(|&i| flags[i]).map(|i| corr[i]).collect();
        if !changed || inl.len() < 8 {
            break;
        }
    }
    if inl.len() < 8 {
        return Err(RelPoseError::NoConsensus(inl.len()));
    }
    let r = rel.rotation_matrix();
    let t = rel.translation().normalize();
    let parallax = median_parallax(&r, &inl);
    if parallax < params.min_parallax_deg {
        return Err(RelPoseError::DegenerateMotion(parallax));
    }
    let e = skew(&t) * r;
    let (mut inliers, mut correspondences) = (Vec::new(), Vec::new());
    for i in (0..n).filter(|&i| flags[i]) {
        inliers.push(matches[i]);
        correspondences.push(corr[i]);
    }
    if inliers.len() < 8 {
        return Err(RelPoseError::NoConsensus(inliers.len()));
    }
    Ok(TwoViewResult {
        rotation: r,
        direction: t,
        essential: e,
        inliers,
        correspondences,
        median_parallax_deg: parallax,
    })
}

/// Levenberg–Marquardt on the epipolar distances of `corr` over a relative
/// pose whose translation norm is a free gauge; Huber loss at `threshold`.
fn refine_epipolar(rel: &Pose, corr: &[Correspondence], threshold: f64) -> Result<Pose, RelPoseError> {
    let mut p = Problem::new();
    let b = p.add_pose_block(rel);
    for c in corr {
        p.add_residual_block(
            Box::new(SampsonCost {
                correspondence: *c,
                calib: None,
            }),
            vec![b],
            RobustLoss::Huber(threshold),
        )?;
    }
    let options = SolverOptions {
        max_iters: 50,
        ..SolverOptions::default()
    };
    p.solve(&options)?;
    let out = p.pose(b);
    let t = out.translation();
    if t.norm() <= 1e-12 {
        return Err(GeometryError::DegenerateZeroBaseline.into());
    }
    Ok(Pose::new(*out.rotation(), t.normalize()))
}

/// Matches the two views, then runs [`two_view_from_matches`]. The result is `T_a^b`.
pub fn two_view_geometry(a: &View, b: &View, params: &TwoViewParams) -> Result<TwoViewResult, RelPoseError> {
    let matches = match_features(a.features, b.features, params.ratio).map_err(|_| RelPoseError::InsufficientMatches(0))?;
    two_view_from_matches(a, b, &matches, params)
}

/// Solves `s1 d1 + s2 R_LM d2 = t_LR` for the unknown scales of
/// `T_left^map` (`left_map`) and `T_map^right` (`map_right`).
pub fn estimate_translation_scale(
    left_map: &TwoViewResult,
    map_right: &TwoViewResult,
    calib: &Pose,
) -> Result<(f64, f64), RelPoseError> {
    let t = calib.translation();
    if t.norm() <= 1e-6 {
        return Err(RelPoseError::ZeroBaseline);
    }
    let a = Matrix3x2::from_columns(&[left_map.direction, left_map.rotation * map_right.direction]);
    let svd = a.svd(true, true);
    let (smax, smin) = (svd.singular_values.max(), svd.singular_values.min());
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if cond > 1e6 {
        return Err(RelPoseError::IllConditioned(cond));
    }
    let s = svd.solve(t, 0.0).map_err(|_| RelPoseError::IllConditioned(cond))?;
    if s[0] <= 0.0 || s[1] <= 0.0 {
        return Err(RelPoseError::NegativeScale(s[0], s[1]));
    }
    Ok((s[0], s[1]))
}

/// Point-to-epipolar-line distances `(source, target)` for `E = [t]x R` of
/// `rel`, and their Jacobian with respect to a left perturbation of `rel`.
pub fn epipolar_residual(rel: &Pose, c: &Correspondence, jacobian: bool) -> Option<(Vector2<f64>, Matrix2x6<f64>)> {
    let r = rel.rotation_matrix();
    let t = *rel.translation();
    let e = skew(&t) * r;
    let x = homogenize(&c.source);
    let xp = homogenize(&c.target);
    let ls = e.transpose() * xp;
    let lt = e * x;
    let ns = ls.x.hypot(ls.y);
    let nt = lt.x.hypot(lt.y);
    if !(ns > 1e-300 && nt > 1e-300) || !ns.is_finite() || !nt.is_finite() {
        return None;
    }
    let num = xp.dot(&lt);
    let res = Vector2::new(num / ns, num / nt);
    let mut jac = Matrix2x6::zeros();
    if jacobian {
        for k in 0..6 {
            let mut ek = Vector3::zeros();
            ek[k % 3] = 1.0;
            // exp(delta) T: R -> (I + [phi]x) R, t -> t + phi x t + rho
            let de = if k < 3 {
                skew(&ek.cross(&t)) * r + skew(&t) * skew(&ek) * r
            } else {
                skew(&ek) * r
            };
            let dnum = xp.dot(&(de * x));
            let dls = de.transpose() * xp;
            let dlt = de * x;
            let dns = (ls.x * dls.x + ls.y * dls.y) / ns;
            let dnt = (lt.x * dlt.x + lt.y * dlt.y) / nt;
            jac[(0, k)] = dnum / ns - num * dns / (ns * ns);
            jac[(1, k)] = dnum / nt - num * dnt / (nt * nt);
        }
    }
    Some((res, jac))
}

/// Epipolar residual of one correspondence on the `T_left^map` block. With
/// `calib = Some(T_left^right)` the pair is (map, right) and the evaluated
/// pose is `T_map^right = T_left^map^-1 T_left^right`.
#[derive(Debug, Clone)]
pub struct SampsonCost {
    pub correspondence: Correspondence,
    pub calib: Option<Pose>,
}

impl CostFunction for SampsonCost {
    fn num_residuals(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Option<Evaluation> {
        let t_lm = Pose::from_params(params[0]);
        let rel = match &self.calib {
            None => t_lm.clone(),
            Some(c) => t_lm.inverse().compose(c),
        };
        let (r, mut j) = epipolar_residual(&rel, &self.correspondence, jacobians)?;
        let mut jac = Vec::new();
        if jacobians {
            if self.calib.is_some() {
                j = j * -t_lm.inverse().adjoint();
            }
            jac.push(DMatrix::from_column_slice(2, 6, j.as_slice()));
        }
        Some(Evaluation {
            residuals: DVector::from_column_slice(r.as_slice()),
            jacobians: jac,
        })
    }
}

/// Joint Sampson cost of `T_left^map` over both frame pairs.
pub fn joint_cost(t_lm: &Pose, calib: &Pose, left_map: &[Correspondence], map_right: &[Correspondence]) -> f64 {
    let t_mr = t_lm.inverse().compose(calib);
    let sum = |rel: &Pose, cs: &[Correspondence]| -> f64 {
        cs.iter()
            .map(|c| epipolar_residual(rel, c, false).map_or(f64::INFINITY, |(r, _)| r.norm_squared()))
            .sum()
    };
    sum(t_lm, left_map) + sum(&t_mr, map_right)
}

/// Minimizes the summed Sampson distances over the six parameters of
/// `T_left^map`, with `T_map^right` tied to it through the calibration.
/// `left_map` rays: source in the map frame, target in the left frame;
/// `map_right` rays: source in the right frame, target in the map frame.
pub fn joint_refine(
    initial: &Pose,
    calib: &Pose,
    left_map: &[Correspondence],
    map_right: &[Correspondence],
    options: &SolverOptions,
) -> Result<RelativePoseEstimate, RelPoseError> {
    let mut p = Problem::new();
    let b = p.add_pose_block(initial);
    for c in left_map {
        p.add_residual_block(
            Box::new(SampsonCost {
                correspondence: *c,
                calib: None,
            }),
            vec![b],
            RobustLoss::Trivial,
        )?;
    }
    for c in map_right {
        p.add_residual_block(
            Box::new(SampsonCost {
                correspondence: *c,
                calib: Some(calib.clone()),
            }),
            vec![b],
            RobustLoss::Trivial,
        )?;
    }
    let report = p.solve(options)?;
    let pose = p.pose(b);
    let t_mr = pose.inverse().compose(calib);
    Ok(RelativePoseEstimate {
        scale_left: pose.translation().norm(),
        scale_right: t_mr.translation().norm(),
        pose,
        residual: report.final_cost,
        initial_residual: report.initial_cost,
    })
}

/// Full pipeline: two-view checks for (left, map) and (map, right), the
/// linear scale fit against the calibrated `T_left^right`, then joint
/// refinement. Returns `T_left^map` at metric scale.
pub fn estimate_stereo_relative_pose(
    map: &View,
    left: &View,
    right: &View,
    calib: &Pose,
    params: &TwoViewParams,
    options: &SolverOptions,
) -> Result<RelativePoseEstimate, RelPoseError> {
    let lm = two_view_geometry(left, map, params).map_err(|e| e.at(Stage::LeftMap))?;
    let mr = two_view_geometry(map, right, params).map_err(|e| e.at(Stage::MapRight))?;
    let (s1, _) = estimate_translation_scale(&lm, &mr, calib).map_err(|e| e.at(Stage::Scale))?;
    let initial = Pose::from_matrix_parts(&lm.rotation, lm.direction * s1);
    joint_refine(&initial, calib, &lm.correspondences, &mr.correspondences, options).map_err(|e| e.at(Stage::Refine))
}

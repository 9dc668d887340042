//! Absolute trajectory error after optional rigid alignment.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};

use super::HarnessError;
use crate::geometry::Pose;
use crate::io::TrajectoryRecord;
use crate::FrameId;

/// Association window for timestamps, seconds.
pub const MAX_TIME_DIFFERENCE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    None,
    /// Rotation and translation, no scale.
    Se3,
}

impl FromStr for Alignment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Alignment::None),
            "se3" => Ok(Alignment::Se3),
            _ => Err(format!("unknown alignment '{s}' (none, se3)")),
        }
    }
}

/// Translation error statistics in metres.
#[derive(Debug, Clone, PartialEq)]
pub struct AteReport {
    pub rmse: f64,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    /// Maps estimate-world points into the reference world: `p_ref = R p_est + t`.
    pub alignment: Pose,
    pub pairs: usize,
}

impl AteReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("rmse", self.rmse),
            ("mean", self.mean),
            ("median", self.median),
            ("std", self.std),
            ("min", self.min),
            ("max", self.max),
        ] {
            let _ = writeln!(s, "{k} = {v:e}");
        }
        let q = self.alignment.quaternion_wxyz();
        let t = self.alignment.translation_array();
        let _ = writeln!(s, "pairs = {}", self.pairs);
        let _ = writeln!(s, "alignment_rotation_wxyz = {:e} {:e} {:e} {:e}", q[0], q[1], q[2], q[3]);
        let _ = writeln!(s, "alignment_translation = {:e} {:e} {:e}", t[0], t[1], t[2]);
        s
    }
}

/// Closed-form rigid fit `dst ≈ R src + t` (SVD of the cross-covariance).
pub fn rigid_alignment(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - mu_s) * (d - mu_d).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let v = vt.transpose();
    let mut d = Matrix3::identity();
    if (v * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = v * d * u.transpose();
    Pose::from_matrix_parts(&r, mu_d - r * mu_s)
}

/// Statistics over `(estimate centre, reference centre)` pairs.
pub fn ate_from_centers(pairs: &[(Vector3<f64>, Vector3<f64>)], align: Alignment) -> Result<AteReport, HarnessError> {
    if pairs.is_empty() {
        return Err(HarnessError::NoOverlap);
    }
    let est: Vec<_> = pairs.iter().map(|p| p.0).collect();
    let reference: Vec<_> = pairs.iter().map(|p| p.1).collect();
    let alignment = match align {
        Alignment::None => Pose::identity(),
        Alignment::Se3 => rigid_alignment(&est, &reference),
    };
    let mut errs: Vec<f64> = est
        .iter()
        .zip(&reference)
        .map(|(e, r)| (alignment.transform_point(e) - r).norm())
        .collect();
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    errs.sort_by(f64::total_cmp);
    let m = errs.len();
    let median = if m % 2 == 1 { errs[m / 2] } else { 0.5 * (errs[m / 2 - 1] + errs[m / 2]) };
    Ok(AteReport {
        rmse,
        mean,
        median,
        std,
        min: errs[0],
        max: errs[m - 1],
        alignment,
        pairs: m,
    })
}

/// ATE between two timestamped trajectories. Each estimate sample is paired
/// with the nearest unused reference sample within 10 ms.
pub fn evaluate_ate(
    estimate: &[TrajectoryRecord],
    reference: &[TrajectoryRecord],
    align: Alignment,
) -> Result<AteReport, HarnessError> {
    let mut refs: Vec<&TrajectoryRecord> = reference.iter().collect();
    refs.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut used = vec![false; refs.len()];
    let mut pairs = Vec::new();
    for e in estimate {
        let i = refs.partition_point(|r| r.timestamp < e.timestamp);
        let best = [i.checked_sub(1), Some(i)]
            .into_iter()
            .flatten()
            .filter(|&j| j < refs.len() && !used[j])
            .map(|j| (j, (refs[j].timestamp - e.timestamp).abs()))
            .filter(|&(_, dt)| dt <= MAX_TIME_DIFFERENCE)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((j, _)) = best {
            used[j] = true;
            pairs.push((e.pose.center(), refs[j].pose.center()));
        }
    }
    ate_from_centers(&pairs, align)
}

/// ATE over frames present in both maps, keyed by frame id.
pub fn evaluate_ate_frames(
    estimate: &BTreeMap<FrameId, Pose>,
    reference: &BTreeMap<FrameId, Pose>,
    align: Alignment,
) -> Result<AteReport, HarnessError> {
    let pairs: Vec<_> = estimate
        .iter()
        .filter_map(|(id, e)| reference.get(id).map(|r| (e.center(), r.center())))
        .collect();
    ate_from_centers(&pairs, align)
}

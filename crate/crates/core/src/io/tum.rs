use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use super::IoError;
use crate::geometry::Pose;

/// One trajectory sample. `pose` is world-to-camera like everywhere else;
/// the file stores its inverse (the camera pose in the world).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryRecord {
    pub timestamp: f64,
    pub pose: Pose,
}

/// `v` with 9 significant digits, trailing zeros trimmed.
pub fn format_significant(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v.is_finite() { "0".into() } else { format!("{v}") };
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (8 - mag).max(0) as usize;
    let mut s = format!("{v:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

pub fn tum_to_string(trajectory: &[TrajectoryRecord]) -> String {
    let mut recs: Vec<&TrajectoryRecord> = trajectory.iter().collect();
    recs.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut out = String::new();
    for r in recs {
        let c = r.pose.inverse();
        let t = c.translation();
        let q = c.rotation();
        out.push_str(&format!("{:.9}", r.timestamp));
        for v in [t.x, t.y, t.z, q.i, q.j, q.k, q.w] {
            out.push(' ');
            out.push_str(&format_significant(v));
        }
        out.push('\n');
    }
    out
}

pub fn tum_from_str(text: &str) -> Result<Vec<TrajectoryRecord>, IoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |field: &str, message: String| IoError::ParseError {
            line: i + 1,
            field: field.into(),
            message,
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 8 {
            return Err(err("record", format!("expected 8 fields, got {}", parts.len())));
        }
        const NAMES: [&str; 8] = ["timestamp", "tx", "ty", "tz", "qx", "qy", "qz", "qw"];
        let mut v = [0.0f64; 8];
        for k in 0..8 {
            v[k] = parts[k].parse().map_err(|e| err(NAMES[k], format!("{e}")))?;
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if q.norm() < 1e-12 {
            return Err(err("qw", "zero quaternion".into()));
        }
        let c = Pose::new(UnitQuaternion::from_quaternion(q), Vector3::new(v[1], v[2], v[3]));
        out.push(TrajectoryRecord {
            timestamp: v[0],
            pose: c.inverse(),
        });
    }
    Ok(out)
}

pub fn write_tum(trajectory: &[TrajectoryRecord], path: &Path) -> Result<(), IoError> {
    super::write_bytes(path, tum_to_string(trajectory).as_bytes())
}

pub fn read_tum(path: &Path) -> Result<Vec<TrajectoryRecord>, IoError> {
    tum_from_str(&super::read_text(path)?)
}

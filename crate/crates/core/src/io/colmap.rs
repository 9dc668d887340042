//! COLMAP sparse text export (`cameras.txt`, `images.txt`, `points3D.txt`).
//! Identifiers are shifted by one since COLMAP ids start at 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::IoError;
use crate::geometry::{CameraKind, CameraModel};
use crate::mapping::SparseMap;
use crate::FrameId;

fn colmap_camera(c: &CameraModel) -> Result<(&'static str, Vec<f64>), IoError> {
    let base = vec![c.fx, c.fy, c.cx, c.cy];
    match (c.kind, c.distortion.len()) {
        (CameraKind::Pinhole, 0) => Ok(("PINHOLE", base)),
        // OPENCV with zero tangential terms is the two-coefficient radial model
        (CameraKind::PinholeRadial, 2) => Ok(("OPENCV", [base, c.distortion.clone(), vec![0.0, 0.0]].concat())),
        (CameraKind::EquidistantFisheye, 4) => Ok(("OPENCV_FISHEYE", [base, c.distortion.clone()].concat())),
        (kind, n) => Err(IoError::UnsupportedCameraKind(format!("{kind:?} with {n} distortion coefficients"))),
    }
}

/// Shortest representation that reads back to the same value.
fn num(v: f64) -> String {
    format!("{v}")
}

/// The three files as strings, in the order cameras, images, points.
/// `names` gives image names; frames without one get `<id>.png`.
pub fn colmap_strings(map: &SparseMap, names: &BTreeMap<FrameId, String>) -> Result<[String; 3], IoError> {
    let mut cams = String::from("# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n");
    let _ = writeln!(cams, "# Number of cameras: {}", map.cameras.len());
    for (id, c) in &map.cameras {
        let (model, params) = colmap_camera(c)?;
        let _ = write!(cams, "{} {model} {} {}", id + 1, c.width, c.height);
        for p in params {
            let _ = write!(cams, " {}", num(p));
        }
        cams.push('\n');
    }

    // per-image observation lists; point2D index is the position in the list
    let mut per_image: BTreeMap<FrameId, Vec<(f64, f64, usize)>> = map.keyframes.keys().map(|&k| (k, Vec::new())).collect();
    let mut tracks: Vec<Vec<(FrameId, usize)>> = Vec::with_capacity(map.landmarks.len());
    for (pi, lm) in map.landmarks.iter().enumerate() {
        let mut t = Vec::new();
        for (o, _) in map.tracks[lm.track].observations.iter().zip(&lm.inliers).filter(|(_, &m)| m) {
            let list = per_image
                .get_mut(&o.frame)
                .ok_or_else(|| IoError::InvariantViolation(format!("observation of unknown frame {}", o.frame)))?;
            t.push((o.frame, list.len()));
            list.push((o.pixel.x, o.pixel.y, pi));
        }
        tracks.push(t);
    }

    let mut images = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    let n_obs: usize = per_image.values().map(|v| v.len()).sum();
    let mean_obs = if map.keyframes.is_empty() { 0.0 } else { n_obs as f64 / map.keyframes.len() as f64 };
    let _ = writeln!(images, "# Number of images: {}, mean observations per image: {}", map.keyframes.len(), num(mean_obs));
    for (id, kf) in &map.keyframes {
        let q = kf.pose.quaternion_wxyz();
        let t = kf.pose.translation_array();
        let name = names.get(id).cloned().unwrap_or_else(|| format!("{id}.png"));
        let _ = write!(images, "{}", id + 1);
        for v in q.iter().chain(t.iter()) {
            let _ = write!(images, " {}", num(*v));
        }
        let _ = writeln!(images, " {} {name}", kf.camera + 1);
        let pts: Vec<String> = per_image[id]
            .iter()
            .map(|(x, y, p)| format!("{} {} {}", num(*x), num(*y), p + 1))
            .collect();
        images.push_str(&pts.join(" "));
        images.push('\n');
    }

    let mut points = String::from(
        "# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n",
    );
    let errors = landmark_errors(map);
    let mean_track = if tracks.is_empty() { 0.0 } else { tracks.iter().map(|t| t.len()).sum::<usize>() as f64 / tracks.len() as f64 };
    let _ = writeln!(points, "# Number of points: {}, mean track length: {}", tracks.len(), num(mean_track));
    for (pi, (lm, t)) in map.landmarks.iter().zip(&tracks).enumerate() {
        let _ = write!(
            points,
            "{} {} {} {} 128 128 128 {}",
            pi + 1,
            num(lm.position.x),
            num(lm.position.y),
            num(lm.position.z),
            num(errors[pi])
        );
        for (f, idx) in t {
            let _ = write!(points, " {} {idx}", f + 1);
        }
        points.push('\n');
    }
    Ok([cams, images, points])
}

fn landmark_errors(map: &SparseMap) -> Vec<f64> {
    let succ = map.successors();
    map.landmarks
        .iter()
        .map(|lm| {
            let errs: Vec<f64> = map.tracks[lm.track]
                .observations
                .iter()
                .zip(&lm.inliers)
                .filter(|(_, &m)| m)
                .filter_map(|(o, _)| {
                    let pose = map.observation_pose(&succ, o).ok()?;
                    let px = map.camera_of(o.frame).ok()?.project(&pose, &lm.position).ok()?;
                    Some((px - o.pixel).norm())
                })
                .collect();
            if errs.is_empty() {
                0.0
            } else {
                errs.iter().sum::<f64>() / errs.len() as f64
            }
        })
        .collect()
}

pub fn write_colmap_sparse(map: &SparseMap, dir: &Path, names: &BTreeMap<FrameId, String>) -> Result<(), IoError> {
    let [c, i, p] = colmap_strings(map, names)?;
    std::fs::create_dir_all(dir).map_err(|e| IoError::Io(dir.display().to_string(), e.to_string()))?;
    super::write_bytes(&dir.join("cameras.txt"), c.as_bytes())?;
    super::write_bytes(&dir.join("images.txt"), i.as_bytes())?;
    super::write_bytes(&dir.join("points3D.txt"), p.as_bytes())
}

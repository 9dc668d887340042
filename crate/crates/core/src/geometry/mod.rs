//! Rigid transforms, camera models and epipolar primitives.

mod camera;
mod epipolar;
mod pose;
mod rig;

use thiserror::Error;

pub use camera::{project, unproject, CameraKind, CameraModel, Projection};
pub use epipolar::{
    decompose_essential, epipolar_eight_point, essential_eight_point, essential_from_pose, essential_unnormalized,
    homogenize, point_line_distance, project_to_essential, ray_depths, sampson_cost,
    symmetric_distances, Correspondence,
};
pub use pose::{
    compose, exp_map, interpolate_jacobians, interpolate_pose, inverse, log_map,
    se3_left_jacobian, se3_left_jacobian_inv, se3_right_jacobian, se3_right_jacobian_inv, skew,
    so3_exp, so3_left_jacobian, so3_left_jacobian_inv, so3_log, Pose, Tangent,
};
pub use rig::RigCalibration;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point has non-positive depth {0}")]
    NonPositiveDepth(f64),
    #[error("incidence angle {0} rad is outside the camera model domain")]
    OutOfModelDomain(f64),
    #[error("undistortion did not converge")]
    UndistortDiverged,
    #[error("zero baseline: essential matrix undefined")]
    DegenerateZeroBaseline,
    #[error("top two cheirality votes tie")]
    CheiralityAmbiguous,
    #[error("line has no normal direction")]
    DegenerateLine,
    #[error("need more correspondences, got {0}")]
    TooFewPoints(usize),
    #[error("svd failed")]
    SvdFailed,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid rig: {0}")]
    InvalidRig(String),
}

/// Translation and geodesic rotation distance between the frames of two poses.
///
/// Translation is measured between the frame origins (`Pose::center`), so it
/// is the physical distance between two cameras for world-to-camera poses.
pub fn pose_distance(a: &Pose, b: &Pose) -> (f64, f64) {
    let dt = (a.center() - b.center()).norm();
    let dr = a.rotation().inverse() * b.rotation();
    (dt, so3_log(&dr).norm())
}

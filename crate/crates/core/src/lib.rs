//! Trajectory refinement and sparse mapping.
//!
//! Takes keyframes with coarse initial poses and local features, selects a
//! non-redundant set of image pairs from the pose graph, closes loops with a
//! bag-of-words retrieval stage and a stereo relative-pose estimator,
//! optimizes the pose graph, then alternates triangulation and two-stage
//! bundle adjustment into a sparse map.

pub mod features;
pub mod geometry;
pub mod harness;
pub mod io;
pub mod mapping;
pub mod posegraph;
pub mod relpose;
pub mod retrieval;
pub mod solver;
pub mod viewgraph;
pub mod vocabulary;

pub use geometry::{CameraModel, Pose, RigCalibration};

/// Sequential keyframe identifier.
pub type FrameId = u32;
/// Camera identifier within a rig.
pub type CameraId = u32;

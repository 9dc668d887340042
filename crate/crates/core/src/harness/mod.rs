//! Synthetic scenes, trajectory evaluation, pipeline orchestration and the
//! command-line front end.

mod ate;
pub mod cli;
pub mod pipeline;
mod scene;

use thiserror::Error;

pub use ate::{ate_from_centers, evaluate_ate, evaluate_ate_frames, rigid_alignment, Alignment, AteReport, MAX_TIME_DIFFERENCE};
pub use pipeline::{
    build_map, build_vocabulary, detect_loop_edges, extract_all, localize, loops_from_str, loops_to_string, match_pairs,
    optimize_poses, read_loops, refine_extrinsics, run_pipeline, select_pairs, write_loops, PipelineConfig,
    PipelineOutput, ViewGraphMode,
};
pub use scene::{default_camera, generate_scene, three_camera_rig, NoiseSpec, SceneSpec, Shape, SyntheticScene};

use crate::features::FeatureError;
use crate::io::IoError;
use crate::mapping::MappingError;
use crate::posegraph::PoseGraphError;
use crate::vocabulary::VocabularyError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("trajectories share no timestamps")]
    NoOverlap,
}

impl HarnessError {
    /// Process exit status: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Data(_) | HarnessError::NoOverlap => 2,
            HarnessError::Numerical(_) => 3,
        }
    }
}

impl From<IoError> for HarnessError {
    fn from(e: IoError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<MappingError> for HarnessError {
    fn from(e: MappingError) -> Self {
        match e {
            MappingError::MissingCalibration | MappingError::UnknownCamera(_) | MappingError::UnknownFrame(_) => {
                HarnessError::Data(e.to_string())
            }
            _ => HarnessError::Numerical(e.to_string()),
        }
    }
}

impl From<PoseGraphError> for HarnessError {
    fn from(e: PoseGraphError) -> Self {
        match e {
            PoseGraphError::MissingCalibration | PoseGraphError::UnknownCamera(_) | PoseGraphError::UnknownFrame(_) => {
                HarnessError::Data(e.to_string())
            }
            _ => HarnessError::Numerical(e.to_string()),
        }
    }
}

impl From<VocabularyError> for HarnessError {
    fn from(e: VocabularyError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

impl From<FeatureError> for HarnessError {
    fn from(e: FeatureError) -> Self {
        HarnessError::Data(e.to_string())
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::geometry::{CameraModel, Pose, RigCalibration};
use crate::mapping::{MapFrame, Origin, Shutter};
use crate::{CameraId, FrameId};

/// World-to-camera pose as a `[w, x, y, z]` quaternion and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseRecord {
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl PoseRecord {
    pub fn from_pose(p: &Pose) -> Self {
        Self {
            rotation: p.quaternion_wxyz(),
            translation: p.translation_array(),
        }
    }

    pub fn to_pose(&self) -> Pose {
        Pose::from_wxyz(self.rotation, self.translation)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraEntry {
    pub id: CameraId,
    pub model: CameraModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrinsicEntry {
    pub camera: CameraId,
    /// Reference-camera frame to this camera.
    pub pose: PoseRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RigEntry {
    pub reference: CameraId,
    pub extrinsics: Vec<ExtrinsicEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShutterEntry {
    Global,
    Rolling { exposure: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyframeEntry {
    pub frame_id: FrameId,
    /// Seconds.
    pub timestamp: f64,
    pub camera_id: CameraId,
    pub image: String,
    pub pose: PoseRecord,
    #[serde(default = "global")]
    pub shutter: ShutterEntry,
    /// Rig capture index. When absent, frames sharing a timestamp form one capture.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sequence: Option<usize>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub prior: bool,
}

fn global() -> ShutterEntry {
    ShutterEntry::Global
}

fn is_false(b: &bool) -> bool {
    !*b
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub cameras: Vec<CameraEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rig: Option<RigEntry>,
    pub keyframes: Vec<KeyframeEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), IoError> {
        let mut cams = BTreeSet::new();
        for c in &self.cameras {
            if !cams.insert(c.id) {
                return Err(IoError::InvariantViolation(format!("duplicate camera id {}", c.id)));
            }
            c.model
                .validate()
                .map_err(|e| IoError::InvariantViolation(format!("camera {}: {e}", c.id)))?;
        }
        let mut frames = BTreeSet::new();
        let mut last_time: BTreeMap<CameraId, f64> = BTreeMap::new();
        for k in &self.keyframes {
            if !frames.insert(k.frame_id) {
                return Err(IoError::InvariantViolation(format!("duplicate frame_id {}", k.frame_id)));
            }
            if !cams.contains(&k.camera_id) {
                return Err(IoError::InvariantViolation(format!(
                    "frame {} references unknown camera {}",
                    k.frame_id, k.camera_id
                )));
            }
            if !k.timestamp.is_finite() {
                return Err(IoError::InvariantViolation(format!("frame {} timestamp not finite", k.frame_id)));
            }
            if let Some(&t) = last_time.get(&k.camera_id) {
                if k.timestamp < t {
                    return Err(IoError::InvariantViolation(format!(
                        "timestamps decrease for camera {} at frame {}",
                        k.camera_id, k.frame_id
                    )));
                }
            }
            last_time.insert(k.camera_id, k.timestamp);
            let qn = k.pose.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (qn - 1.0).abs() > 1e-6 {
                return Err(IoError::InvariantViolation(format!("frame {} quaternion norm {qn}", k.frame_id)));
            }
            if let ShutterEntry::Rolling { exposure } = k.shutter {
                if !(exposure >= 0.0) {
                    return Err(IoError::InvariantViolation(format!("frame {} negative exposure", k.frame_id)));
                }
            }
        }
        if let Some(r) = &self.rig {
            self.rig_calibration_from(r)?;
        }
        Ok(())
    }

    fn rig_calibration_from(&self, r: &RigEntry) -> Result<RigCalibration, IoError> {
        let ext: BTreeMap<CameraId, Pose> = r.extrinsics.iter().map(|e| (e.camera, e.pose.to_pose())).collect();
        if ext.len() != r.extrinsics.len() {
            return Err(IoError::InvariantViolation("duplicate camera in rig".into()));
        }
        if let Some(c) = ext.keys().find(|c| !self.cameras.iter().any(|e| e.id == **c)) {
            return Err(IoError::InvariantViolation(format!("rig references unknown camera {c}")));
        }
        RigCalibration::new(r.reference, ext).map_err(|e| IoError::InvariantViolation(e.to_string()))
    }

    pub fn camera_models(&self) -> BTreeMap<CameraId, CameraModel> {
        self.cameras.iter().map(|c| (c.id, c.model.clone())).collect()
    }

    pub fn rig_calibration(&self) -> Result<Option<RigCalibration>, IoError> {
        self.rig.as_ref().map(|r| self.rig_calibration_from(r)).transpose()
    }

    /// Keyframes as map frames. Missing capture indices are assigned by
    /// ranking distinct timestamps.
    pub fn map_frames(&self) -> Vec<MapFrame> {
        let mut times: Vec<f64> = self.keyframes.iter().map(|k| k.timestamp).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        self.keyframes
            .iter()
            .map(|k| MapFrame {
                id: k.frame_id,
                camera: k.camera_id,
                timestamp: k.timestamp,
                sequence: k
                    .sequence
                    .unwrap_or_else(|| times.partition_point(|&t| t < k.timestamp)),
                pose: k.pose.to_pose(),
                shutter: match k.shutter {
                    ShutterEntry::Global => Shutter::Global,
                    ShutterEntry::Rolling { exposure } => Shutter::Rolling { exposure },
                },
                origin: if k.prior { Origin::Prior } else { Origin::New },
            })
            .collect()
    }
}

fn quoted_field(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    Some(msg[start..end].to_string())
}

pub fn manifest_from_str(text: &str) -> Result<DatasetManifest, IoError> {
    let m: DatasetManifest = serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        IoError::ParseError {
            line: e.line(),
            field: quoted_field(&msg).unwrap_or_default(),
            message: msg,
        }
    })?;
    m.validate()?;
    Ok(m)
}

pub fn manifest_to_string(m: &DatasetManifest) -> String {
    let mut s = serde_json::to_string_pretty(m).expect("manifest serializes");
    s.push('\n');
    s
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, IoError> {
    manifest_from_str(&super::read_text(path)?)
}

pub fn write_manifest(m: &DatasetManifest, path: &Path) -> Result<(), IoError> {
    m.validate()?;
    super::write_bytes(path, manifest_to_string(m).as_bytes())
}

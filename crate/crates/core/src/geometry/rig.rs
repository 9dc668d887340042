use std::collections::BTreeMap;

use super::{GeometryError, Pose};

/// Extrinsics of a rigid multi-camera assembly.
///
/// `extrinsics[c]` maps vehicle (rig body) coordinates into camera `c`, so a
/// camera pose is `T_c^w = T_c^v * T_v^w`. The reference camera defines the
/// vehicle frame and carries the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct RigCalibration {
    pub reference: u32,
    pub extrinsics: BTreeMap<u32, Pose>,
}

impl RigCalibration {
    pub fn single(camera_id: u32) -> Self {
        let mut extrinsics = BTreeMap::new();
        extrinsics.insert(camera_id, Pose::identity());
        Self {
            reference: camera_id,
            extrinsics,
        }
    }

    pub fn new(reference: u32, extrinsics: BTreeMap<u32, Pose>) -> Result<Self, GeometryError> {
        let rig = Self {
            reference,
            extrinsics,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let Some(reference) = self.extrinsics.get(&self.reference) else {
            return Err(GeometryError::InvalidRig(format!(
                "reference camera {} has no extrinsic",
                self.reference
            )));
        };
        if reference.log().norm() > 1e-12 {
            return Err(GeometryError::InvalidRig(
                "reference camera extrinsic must be the identity".into(),
            ));
        }
        Ok(())
    }

    pub fn camera_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.extrinsics.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.extrinsics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extrinsics.is_empty()
    }

    pub fn extrinsic(&self, camera: u32) -> Option<&Pose> {
        self.extrinsics.get(&camera)
    }

    /// `T_a^b = T_a^v (T_b^v)^-1`, mapping camera `b` coordinates into camera `a`.
    pub fn relative(&self, a: u32, b: u32) -> Option<Pose> {
        Some(self.extrinsic(a)?.compose(&self.extrinsic(b)?.inverse()))
    }

    pub fn camera_pose(&self, camera: u32, vehicle: &Pose) -> Option<Pose> {
        Some(self.extrinsic(camera)?.compose(vehicle))
    }

    pub fn vehicle_pose(&self, camera: u32, camera_pose: &Pose) -> Option<Pose> {
        Some(self.extrinsic(camera)?.inverse().compose(camera_pose))
    }
}

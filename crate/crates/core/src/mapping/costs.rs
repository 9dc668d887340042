//! Reprojection residuals for bundle adjustment. Pose blocks use the se3
//! manifold with left perturbations, point blocks are Euclidean.

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix2x6, Matrix3, Vector2, Vector3};

use crate::geometry::{interpolate_jacobians, interpolate_pose, skew, CameraModel, Pose, Projection};
use crate::solver::{CostFunction, Evaluation};

/// Residual and Jacobians of `pi(T X) - observed`: with respect to a left
/// perturbation of `T` and to `X`.
fn project_with_jacobians(
    camera: &CameraModel,
    pose: &Pose,
    x: &Vector3<f64>,
    observed: &Vector2<f64>,
) -> Option<(Vector2<f64>, Matrix2x6<f64>, Matrix2x3<f64>)> {
    let pc = pose.transform_point(x);
    let (px, jp) = camera.project_jacobian(&pc).ok()?;
    let mut dp = nalgebra::Matrix3x6::zeros();
    dp.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(&pc)));
    dp.fixed_view_mut::<3, 3>(0, 3).copy_from(&Matrix3::identity());
    Some((px - observed, jp * dp, jp * pose.rotation_matrix()))
}

fn residual_only(camera: &CameraModel, pose: &Pose, x: &Vector3<f64>, observed: &Vector2<f64>) -> Option<Vector2<f64>> {
    let pc = pose.transform_point(x);
    Some(camera.project_camera(&pc).ok()? - observed)
}

fn dyn2<const C: usize>(m: &nalgebra::SMatrix<f64, 2, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(2, C, m.as_slice())
}

fn eval(r: Vector2<f64>, jac: Vec<DMatrix<f64>>) -> Option<Evaluation> {
    Some(Evaluation {
        residuals: DVector::from_column_slice(r.as_slice()),
        jacobians: jac,
    })
}

/// Global-shutter reprojection on blocks `[pose, point]`.
#[derive(Debug, Clone)]
pub struct ReprojectionCost {
    pub camera: CameraModel,
    pub observed: Vector2<f64>,
}

impl CostFunction for ReprojectionCost {
    fn num_residuals(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Option<Evaluation> {
        let pose = Pose::from_params(params[0]);
        let x = Vector3::from_column_slice(params[1]);
        if !jacobians {
            return eval(residual_only(&self.camera, &pose, &x, &self.observed)?, Vec::new());
        }
        let (r, jt, jx) = project_with_jacobians(&self.camera, &pose, &x, &self.observed)?;
        eval(r, vec![dyn2(&jt), dyn2(&jx)])
    }
}

/// Rolling-shutter reprojection on blocks `[pose, successor, point]`: the
/// point is projected with the pose interpolated at `alpha` between the frame
/// pose and the next keyframe of the same camera.
#[derive(Debug, Clone)]
pub struct RollingShutterCost {
    pub camera: CameraModel,
    pub observed: Vector2<f64>,
    pub alpha: f64,
}

impl CostFunction for RollingShutterCost {
    fn num_residuals(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Option<Evaluation> {
        let a = Pose::from_params(params[0]);
        let b = Pose::from_params(params[1]);
        let x = Vector3::from_column_slice(params[2]);
        let pose = interpolate_pose(&a, &b, self.alpha);
        if !jacobians {
            return eval(residual_only(&self.camera, &pose, &x, &self.observed)?, Vec::new());
        }
        let (r, jt, jx) = project_with_jacobians(&self.camera, &pose, &x, &self.observed)?;
        let (da, db) = interpolate_jacobians(&a, &b, self.alpha);
        eval(r, vec![dyn2(&(jt * da)), dyn2(&(jt * db)), dyn2(&jx)])
    }
}

/// Reprojection through a rig on blocks `[extrinsic, vehicle, point]`, with
/// camera pose `E_c * V`.
#[derive(Debug, Clone)]
pub struct RigReprojectionCost {
    pub camera: CameraModel,
    pub observed: Vector2<f64>,
}

impl CostFunction for RigReprojectionCost {
    fn num_residuals(&self) -> usize {
        2
    }

    fn evaluate(&self, params: &[&[f64]], jacobians: bool) -> Option<Evaluation> {
        let e = Pose::from_params(params[0]);
        let v = Pose::from_params(params[1]);
        let x = Vector3::from_column_slice(params[2]);
        let pose = e.compose(&v);
        if !jacobians {
            return eval(residual_only(&self.camera, &pose, &x, &self.observed)?, Vec::new());
        }
        let (r, jt, jx) = project_with_jacobians(&self.camera, &pose, &x, &self.observed)?;
        // E exp(d) V = exp(Ad(E) d) E V
        eval(r, vec![dyn2(&jt), dyn2(&(jt * e.adjoint())), dyn2(&jx)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{Manifold, Problem, RobustLoss};
    use nalgebra::UnitQuaternion;

    fn cam() -> CameraModel {
        CameraModel::radial(480.0, 470.0, 320.0, 240.0, 640, 480, -0.1, 0.02)
    }

    fn pose(ax: f64, ay: f64, az: f64, t: [f64; 3]) -> Pose {
        Pose::new(UnitQuaternion::from_euler_angles(ax, ay, az), Vector3::from(t))
    }

    #[test]
    fn analytic_jacobians_match_finite_differences() {
        let x = Vector3::new(0.3, -0.2, 4.0);
        let a = pose(0.05, -0.1, 0.02, [0.1, 0.2, -0.3]);
        let b = pose(0.08, -0.05, 0.04, [0.3, 0.1, -0.2]);
        let observed = Vector2::new(300.0, 250.0);

        let mut p = Problem::new();
        let ba = p.add_pose_block(&a);
        let bb = p.add_pose_block(&b);
        let bx = p.add_parameter_block(x.as_slice().to_vec(), Manifold::Euclidean);
        p.add_residual_block(Box::new(ReprojectionCost { camera: cam(), observed }), vec![ba, bx], RobustLoss::Trivial)
            .unwrap();
        p.add_residual_block(
            Box::new(RollingShutterCost {
                camera: cam(),
                observed,
                alpha: 0.37,
            }),
            vec![ba, bb, bx],
            RobustLoss::Trivial,
        )
        .unwrap();
        p.add_residual_block(Box::new(RigReprojectionCost { camera: cam(), observed }), vec![bb, ba, bx], RobustLoss::Trivial)
            .unwrap();
        for block in [ba, bb, bx] {
            let dev = p.check_jacobian(block, 1e-6);
            assert!(dev < 1e-5, "block {block}: {dev}");
        }
    }

    #[test]
    fn rolling_shutter_with_equal_endpoints_is_global() {
        let a = pose(0.05, -0.1, 0.02, [0.1, 0.2, -0.3]);
        let x = [0.3, -0.2, 4.0];
        let obs = Vector2::new(310.0, 200.0);
        let pa = a.to_params();
        let g = ReprojectionCost { camera: cam(), observed: obs }.evaluate(&[&pa, &x], true).unwrap();
        let rs = RollingShutterCost {
            camera: cam(),
            observed: obs,
            alpha: 0.6,
        }
        .evaluate(&[&pa, &pa, &x], true)
        .unwrap();
        assert!((g.residuals - rs.residuals).norm() < 1e-12);
        assert!((&g.jacobians[0] - (&rs.jacobians[0] + &rs.jacobians[1])).norm() < 1e-9);
    }

    #[test]
    fn identity_extrinsic_matches_plain_reprojection_exactly() {
        let v = pose(0.05, -0.1, 0.02, [0.1, 0.2, -0.3]);
        let x = [0.3, -0.2, 4.0];
        let obs = Vector2::new(310.0, 200.0);
        let pv = v.to_params();
        let pe = Pose::identity().to_params();
        let g = ReprojectionCost { camera: cam(), observed: obs }.evaluate(&[&pv, &x], true).unwrap();
        let r = RigReprojectionCost { camera: cam(), observed: obs }.evaluate(&[&pe, &pv, &x], true).unwrap();
        assert_eq!(g.residuals, r.residuals);
        assert_eq!(g.jacobians[0], r.jacobians[1]);
        assert_eq!(g.jacobians[1], r.jacobians[2]);
    }
}

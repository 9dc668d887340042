use nalgebra::{Matrix3, Matrix4, Matrix6, Quaternion, UnitQuaternion, Vector3, Vector6};

/// Tangent vectors are ordered `(rotation, translation)`.
pub type Tangent = Vector6<f64>;

/// Rigid transform acting on points as `x' = R x + t`.
///
/// Poses in this crate follow the world-to-camera convention: the pose of
/// camera `c` maps world coordinates into camera coordinates, so the relative
/// transform between two frames is `T_a * T_b^-1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose and brings the quaternion to the canonical hemisphere (`w >= 0`).
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: canonical(rotation),
            translation,
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self::new(UnitQuaternion::identity(), translation)
    }

    pub fn from_rotation(rotation: UnitQuaternion<f64>) -> Self {
        Self::new(rotation, Vector3::zeros())
    }

    /// Builds from a rotation matrix; the matrix is orthonormalized first.
    pub fn from_matrix_parts(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    /// Quaternion given as `(w, x, y, z)`. It is normalized unless it is
    /// already unit length to within 1e-10, so stored poses read back bit-exact.
    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Self {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let quat = if (raw.norm() - 1.0).abs() < 1e-10 {
            UnitQuaternion::new_unchecked(raw)
        } else {
            UnitQuaternion::from_quaternion(raw)
        };
        Self::new(quat, Vector3::new(t[0], t[1], t[2]))
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `(w, x, y, z)`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn translation_array(&self) -> [f64; 3] {
        [self.translation.x, self.translation.y, self.translation.z]
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Position of the frame origin expressed in the source frame, `-R^T t`.
    /// For a world-to-camera pose this is the camera centre in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.inverse() * self.translation)
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation_matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_homogeneous(m: &Matrix4<f64>) -> Pose {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into_owned();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into_owned();
        Pose::from_matrix_parts(&r, t)
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn rotation_angle(&self) -> f64 {
        so3_log(&self.rotation).norm()
    }

    pub fn log(&self) -> Tangent {
        log_map(self)
    }

    pub fn exp(v: &Tangent) -> Pose {
        exp_map(v)
    }

    /// Adjoint in `(rotation, translation)` ordering: `T exp(v) T^-1 = exp(Ad v)`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(3, 0)
            .copy_from(&(skew(&self.translation) * r));
        ad
    }

    /// `[w, x, y, z, tx, ty, tz]`, the layout used by solver parameter blocks.
    pub fn to_params(&self) -> [f64; 7] {
        let q = self.quaternion_wxyz();
        [
            q[0],
            q[1],
            q[2],
            q[3],
            self.translation.x,
            self.translation.y,
            self.translation.z,
        ]
    }

    pub fn from_params(p: &[f64]) -> Pose {
        Pose::new(
            UnitQuaternion::new_unchecked(Quaternion::new(p[0], p[1], p[2], p[3])),
            Vector3::new(p[4], p[5], p[6]),
        )
    }

    /// Largest deviation between two poses in tangent-space norm.
    pub fn distance_log(&self, other: &Pose) -> f64 {
        self.inverse().compose(other).log().norm()
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn inverse(a: &Pose) -> Pose {
    a.inverse()
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn so3_exp(phi: &Vector3<f64>) -> UnitQuaternion<f64> {
    let theta = phi.norm();
    let half = 0.5 * theta;
    let k = if theta < 1e-6 {
        0.5 - theta * theta / 48.0
    } else {
        half.sin() / theta
    };
    canonical(UnitQuaternion::new_unchecked(Quaternion::new(
        half.cos(),
        k * phi.x,
        k * phi.y,
        k * phi.z,
    )))
}

/// Rotation vector of a unit quaternion, angle in `[0, pi]`.
///
/// At exactly `pi` both axis signs describe the same rotation; the one whose
/// first non-zero component is positive is returned.
pub fn so3_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    let q = canonical(*q);
    let w = q.w;
    let v = q.imag();
    let n = v.norm();
    if n < 1e-12 {
        return v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w));
    }
    let theta = 2.0 * n.atan2(w);
    let mut phi = v * (theta / n);
    if w == 0.0 {
        let first = [phi.x, phi.y, phi.z]
            .into_iter()
            .find(|c| c.abs() > 1e-15)
            .unwrap_or(0.0);
        if first < 0.0 {
            phi = -phi;
        }
    }
    phi
}

/// Left Jacobian of SO(3).
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < 1e-5 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() + k * a + k * k * b
}

pub fn so3_left_jacobian_inv(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let c = if theta < 1e-5 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() - k * 0.5 + k * k * c
}

pub fn exp_map(v: &Tangent) -> Pose {
    let phi = Vector3::new(v[0], v[1], v[2]);
    let rho = Vector3::new(v[3], v[4], v[5]);
    Pose::new(so3_exp(&phi), so3_left_jacobian(&phi) * rho)
}

pub fn log_map(p: &Pose) -> Tangent {
    let phi = so3_log(&p.rotation);
    let rho = so3_left_jacobian_inv(&phi) * p.translation;
    Vector6::new(phi.x, phi.y, phi.z, rho.x, rho.y, rho.z)
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q(phi: &Vector3<f64>, rho: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let p = skew(phi);
    let r = skew(rho);
    let (c1, c2, c3) = if theta < 1e-4 {
        (
            1.0 / 6.0 - theta2 / 120.0,
            1.0 / 24.0 - theta2 / 720.0,
            1.0 / 120.0 - theta2 / 2520.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta - s) / (theta2 * theta),
            (theta2 + 2.0 * c - 2.0) / (2.0 * theta2 * theta2),
            (2.0 * theta - 3.0 * s + theta * c) / (2.0 * theta2 * theta2 * theta),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    r * 0.5 + (pr + rp + prp) * c1 + (p * pr + rp * p - prp * 3.0) * c2
        + (prp * p + p * prp) * c3
}

/// Left Jacobian of SE(3): `exp(v + dv) ~ exp(J_l(v) dv) exp(v)`.
pub fn se3_left_jacobian(v: &Tangent) -> Matrix6<f64> {
    let phi = Vector3::new(v[0], v[1], v[2]);
    let rho = Vector3::new(v[3], v[4], v[5]);
    let j = so3_left_jacobian(&phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&j);
    out.fixed_view_mut::<3, 3>(3, 0).copy_from(&se3_q(&phi, &rho));
    out
}

pub fn se3_left_jacobian_inv(v: &Tangent) -> Matrix6<f64> {
    let phi = Vector3::new(v[0], v[1], v[2]);
    let rho = Vector3::new(v[3], v[4], v[5]);
    let jinv = so3_left_jacobian_inv(&phi);
    let q = se3_q(&phi, &rho);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-(jinv * q * jinv)));
    out
}

pub fn se3_right_jacobian(v: &Tangent) -> Matrix6<f64> {
    se3_left_jacobian(&(-v))
}

pub fn se3_right_jacobian_inv(v: &Tangent) -> Matrix6<f64> {
    se3_left_jacobian_inv(&(-v))
}

/// Geodesic interpolation `T_a * exp(s * log(T_a^-1 T_b))`.
pub fn interpolate_pose(a: &Pose, b: &Pose, s: f64) -> Pose {
    if s == 0.0 {
        return *a;
    }
    if s == 1.0 {
        return *b;
    }
    let delta = a.inverse().compose(b).log();
    a.compose(&exp_map(&(delta * s)))
}

/// Derivatives of the interpolated pose with respect to left perturbations of
/// its endpoints. Returns `(d/da, d/db)`, both mapping endpoint tangents to the
/// left-perturbation tangent of the interpolated pose.
pub fn interpolate_jacobians(a: &Pose, b: &Pose, s: f64) -> (Matrix6<f64>, Matrix6<f64>) {
    // T(s) = exp(s * zeta) * T_a with zeta = log(T_b T_a^-1).
    let zeta = b.compose(&a.inverse()).log();
    let sz = zeta * s;
    let jl_s = se3_left_jacobian(&sz);
    let d_b = jl_s * se3_left_jacobian_inv(&zeta) * s;
    let d_a = exp_map(&sz).adjoint() - jl_s * se3_right_jacobian_inv(&zeta) * s;
    (d_a, d_b)
}

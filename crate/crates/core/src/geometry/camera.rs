use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Pose};

/// Supported projection models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraKind {
    Pinhole,
    /// Polynomial radial distortion with coefficients `[k1, k2]`.
    PinholeRadial,
    /// Equidistant fisheye, `theta_d = theta (1 + k1 theta^2 + ... + k4 theta^8)`.
    EquidistantFisheye,
}

pub const UNDISTORT_MAX_ITERS: usize = 50;
pub const UNDISTORT_TOL: f64 = 1e-10;
const MIN_DEPTH: f64 = 1e-9;

/// Intrinsics plus the pixel/ray mapping of one physical camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub kind: CameraKind,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    #[serde(default)]
    pub distortion: Vec<f64>,
}

/// Bidirectional mapping between camera-frame points and pixels.
///
/// New models plug into the pipeline by implementing this trait; matching,
/// triangulation and bundle adjustment only go through these methods.
pub trait Projection {
    fn project_camera(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError>;
    /// Derivative of the pixel with respect to the camera-frame point.
    fn project_jacobian(&self, p: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2x3<f64>), GeometryError>;
    fn unproject(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, GeometryError>;
}

impl CameraModel {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Self {
        Self {
            kind: CameraKind::Pinhole,
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            distortion: Vec::new(),
        }
    }

    pub fn radial(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
        k1: f64,
        k2: f64,
    ) -> Self {
        Self {
            kind: CameraKind::PinholeRadial,
            distortion: vec![k1, k2],
            ..Self::pinhole(fx, fy, cx, cy, width, height)
        }
    }

    pub fn fisheye(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32, k: [f64; 4]) -> Self {
        Self {
            kind: CameraKind::EquidistantFisheye,
            distortion: k.to_vec(),
            ..Self::pinhole(fx, fy, cx, cy, width, height)
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(GeometryError::InvalidCamera("empty image size".into()));
        }
        let max = match self.kind {
            CameraKind::Pinhole => 0,
            CameraKind::PinholeRadial => 2,
            CameraKind::EquidistantFisheye => 4,
        };
        if self.distortion.len() > max {
            return Err(GeometryError::InvalidCamera(format!(
                "{:?} takes at most {max} distortion coefficients",
                self.kind
            )));
        }
        Ok(())
    }

    fn coeff(&self, i: usize) -> f64 {
        self.distortion.get(i).copied().unwrap_or(0.0)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }

    /// Projects a world point seen from `pose` (world-to-camera).
    pub fn project(&self, pose: &Pose, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        self.project_camera(&pose.transform_point(x))
    }

    fn fisheye_poly(&self, theta: f64) -> (f64, f64) {
        let t2 = theta * theta;
        let (k1, k2, k3, k4) = (self.coeff(0), self.coeff(1), self.coeff(2), self.coeff(3));
        let value = theta * (1.0 + t2 * (k1 + t2 * (k2 + t2 * (k3 + t2 * k4))));
        let deriv = 1.0 + t2 * (3.0 * k1 + t2 * (5.0 * k2 + t2 * (7.0 * k3 + t2 * 9.0 * k4)));
        (value, deriv)
    }

    fn distort_normalized(&self, p: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2x3<f64>), GeometryError> {
        if p.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(p.z));
        }
        let (x, y, z) = (p.x, p.y, p.z);
        let iz = 1.0 / z;
        let xn = x * iz;
        let yn = y * iz;
        // d(xn, yn)/d(x, y, z)
        let dn = Matrix2x3::new(iz, 0.0, -xn * iz, 0.0, iz, -yn * iz);
        match self.kind {
            CameraKind::Pinhole => Ok((Vector2::new(xn, yn), dn)),
            CameraKind::PinholeRadial => {
                let (k1, k2) = (self.coeff(0), self.coeff(1));
                let s = xn * xn + yn * yn;
                let d = 1.0 + s * (k1 + s * k2);
                let dd = k1 + 2.0 * k2 * s;
                let jd = nalgebra::Matrix2::new(
                    d + 2.0 * xn * xn * dd,
                    2.0 * xn * yn * dd,
                    2.0 * xn * yn * dd,
                    d + 2.0 * yn * yn * dd,
                );
                Ok((Vector2::new(xn * d, yn * d), jd * dn))
            }
            CameraKind::EquidistantFisheye => {
                let a2 = x * x + y * y;
                let a = a2.sqrt();
                let theta = a.atan2(z);
                let (td, tdp) = self.fisheye_poly(theta);
                if tdp <= 0.0 {
                    return Err(GeometryError::OutOfModelDomain(theta));
                }
                if a < 1e-12 * z {
                    return Ok((Vector2::new(xn, yn), dn));
                }
                let rho2 = a2 + z * z;
                let dtheta = Vector3::new(z * x / (a * rho2), z * y / (a * rho2), -a / rho2);
                let g = td / a;
                // dg/dp = td' dtheta / a - td * d(a)/dp / a^2
                let da = Vector3::new(x / a, y / a, 0.0);
                let dg = dtheta * (tdp / a) - da * (td / a2);
                let j = Matrix2x3::new(
                    g + x * dg.x,
                    x * dg.y,
                    x * dg.z,
                    y * dg.x,
                    g + y * dg.y,
                    y * dg.z,
                );
                Ok((Vector2::new(g * x, g * y), j))
            }
        }
    }

    /// Normalized undistorted coordinates to a unit ray.
    fn undistort(&self, xd: f64, yd: f64) -> Result<Vector3<f64>, GeometryError> {
        match self.kind {
            CameraKind::Pinhole => Ok(Vector3::new(xd, yd, 1.0).normalize()),
            CameraKind::PinholeRadial => {
                let (k1, k2) = (self.coeff(0), self.coeff(1));
                let (mut x, mut y) = (xd, yd);
                for _ in 0..UNDISTORT_MAX_ITERS {
                    let s = x * x + y * y;
                    let d = 1.0 + s * (k1 + s * k2);
                    let nx = xd / d;
                    let ny = yd / d;
                    let step = (nx - x).abs().max((ny - y).abs());
                    x = nx;
                    y = ny;
                    if !x.is_finite() || !y.is_finite() {
                        break;
                    }
                    if step < UNDISTORT_TOL {
                        return Ok(Vector3::new(x, y, 1.0).normalize());
                    }
                }
                Err(GeometryError::UndistortDiverged)
            }
            CameraKind::EquidistantFisheye => {
                let rd = (xd * xd + yd * yd).sqrt();
                if rd < 1e-15 {
                    return Ok(Vector3::new(0.0, 0.0, 1.0));
                }
                let mut theta = rd;
                for _ in 0..UNDISTORT_MAX_ITERS {
                    let (td, _) = self.fisheye_poly(theta);
                    let scale = td / theta;
                    let next = rd / scale;
                    let step = (next - theta).abs();
                    theta = next;
                    if !theta.is_finite() {
                        break;
                    }
                    if step < UNDISTORT_TOL {
                        let s = theta.sin() / rd;
                        return Ok(Vector3::new(xd * s, yd * s, theta.cos()));
                    }
                }
                Err(GeometryError::UndistortDiverged)
            }
        }
    }

    /// Pixel to normalized image-plane coordinates `(x/z, y/z)` after undistortion.
    pub fn normalized(&self, pixel: &Vector2<f64>) -> Result<Vector2<f64>, GeometryError> {
        let r = self.unproject(pixel)?;
        if r.z <= MIN_DEPTH {
            return Err(GeometryError::NonPositiveDepth(r.z));
        }
        Ok(Vector2::new(r.x / r.z, r.y / r.z))
    }

    /// Mean focal length, used to convert pixel thresholds to normalized units.
    pub fn focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

impl Projection for CameraModel {
    fn project_camera(&self, p: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
        let (n, _) = self.distort_normalized(p)?;
        Ok(Vector2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy))
    }

    fn project_jacobian(&self, p: &Vector3<f64>) -> Result<(Vector2<f64>, Matrix2x3<f64>), GeometryError> {
        let (n, j) = self.distort_normalized(p)?;
        let mut jac = j;
        for c in 0..3 {
            jac[(0, c)] *= self.fx;
            jac[(1, c)] *= self.fy;
        }
        Ok((Vector2::new(self.fx * n.x + self.cx, self.fy * n.y + self.cy), jac))
    }

    fn unproject(&self, pixel: &Vector2<f64>) -> Result<Vector3<f64>, GeometryError> {
        let xd = (pixel.x - self.cx) / self.fx;
        let yd = (pixel.y - self.cy) / self.fy;
        self.undistort(xd, yd)
    }
}

pub fn project(cam: &CameraModel, pose: &Pose, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    cam.project(pose, x)
}

pub fn unproject(cam: &CameraModel, pixel: &Vector2<f64>) -> Result<Vector3<f64>, GeometryError> {
    cam.unproject(pixel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam() -> CameraModel {
        CameraModel::pinhole(100.0, 100.0, 50.0, 50.0, 100, 100)
    }

    #[test]
    fn pinhole_basics() {
        let c = cam();
        let p = c.project(&Pose::identity(), &Vector3::new(0.0, 0.0, 1.0)).unwrap();
        assert_eq!(p, Vector2::new(50.0, 50.0));
        let p = c.project(&Pose::identity(), &Vector3::new(0.1, 0.0, 1.0)).unwrap();
        assert!((p - Vector2::new(60.0, 50.0)).norm() < 1e-12);
        let r = c.unproject(&Vector2::new(50.0, 50.0)).unwrap();
        assert_eq!(r, Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn behind_camera_is_rejected() {
        let c = cam();
        assert!(matches!(
            c.project(&Pose::identity(), &Vector3::new(0.0, 0.0, -1.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
        assert!(matches!(
            c.project(&Pose::identity(), &Vector3::new(1.0, 0.0, 0.0)),
            Err(GeometryError::NonPositiveDepth(_))
        ));
    }

    #[test]
    fn radial_forward_model_matches_formula() {
        let c = CameraModel::radial(300.0, 310.0, 320.0, 240.0, 640, 480, -0.2, 0.05);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let p = Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(2.0..5.0),
            );
            let x = p.x / p.z;
            let y = p.y / p.z;
            let r2 = x * x + y * y;
            let f = 1.0 - 0.2 * r2 + 0.05 * r2 * r2;
            let expected = Vector2::new(300.0 * x * f + 320.0, 310.0 * y * f + 240.0);
            let got = c.project_camera(&p).unwrap();
            assert!((got - expected).norm() < 1e-9);
        }
    }

    fn round_trip(c: &CameraModel, seed: u64, n: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..n {
            let px = Vector2::new(
                rng.random_range(0.0..c.width as f64),
                rng.random_range(0.0..c.height as f64),
            );
            let ray = c.unproject(&px).unwrap();
            assert!((ray.norm() - 1.0).abs() < 1e-12);
            for depth in [0.5, 3.0, 40.0] {
                let back = c.project_camera(&(ray * depth)).unwrap();
                assert!((back - px).norm() < 1e-6, "{back} vs {px}");
            }
        }
    }

    #[test]
    fn unproject_round_trips() {
        round_trip(&cam(), 2, 100);
        round_trip(&CameraModel::radial(400.0, 400.0, 320.0, 240.0, 640, 480, -0.1, 0.01), 3, 100);
        round_trip(
            &CameraModel::fisheye(300.0, 300.0, 320.0, 240.0, 640, 480, [0.02, -0.01, 0.002, -0.0005]),
            4,
            100,
        );
    }

    #[test]
    fn strong_distortion_diverges() {
        let c = CameraModel::radial(100.0, 100.0, 50.0, 50.0, 100, 100, 5.0, 5.0);
        assert!(matches!(
            c.unproject(&Vector2::new(99.0, 99.0)),
            Err(GeometryError::UndistortDiverged)
        ));
    }

    #[test]
    fn fisheye_outside_domain() {
        let c = CameraModel::fisheye(300.0, 300.0, 320.0, 240.0, 640, 480, [-0.5, 0.0, 0.0, 0.0]);
        // derivative 1 - 1.5 theta^2 turns negative near 0.82 rad
        let p = Vector3::new(1.5, 0.0, 1.0);
        assert!(matches!(c.project_camera(&p), Err(GeometryError::OutOfModelDomain(_))));
    }

    #[test]
    fn projection_jacobians_match_finite_differences() {
        let cams = [
            cam(),
            CameraModel::radial(400.0, 390.0, 320.0, 240.0, 640, 480, -0.15, 0.02),
            CameraModel::fisheye(300.0, 310.0, 320.0, 240.0, 640, 480, [0.02, -0.01, 0.002, -0.0005]),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for c in &cams {
            for _ in 0..10 {
                let p = Vector3::new(
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(1.5..4.0),
                );
                let (_, j) = c.project_jacobian(&p).unwrap();
                let h = 1e-6;
                for k in 0..3 {
                    let mut d = Vector3::zeros();
                    d[k] = h;
                    let num = (c.project_camera(&(p + d)).unwrap() - c.project_camera(&(p - d)).unwrap())
                        / (2.0 * h);
                    for r in 0..2 {
                        let denom = 1.0f64.max(j[(r, k)].abs());
                        assert!((num[r] - j[(r, k)]).abs() / denom < 1e-6);
                    }
                }
            }
        }
    }
}

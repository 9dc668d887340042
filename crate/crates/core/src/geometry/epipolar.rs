use nalgebra::{DMatrix, Matrix3, Vector3};

use super::pose::skew;
use super::{GeometryError, Pose};

/// A correspondence in homogeneous normalized coordinates: `target^T E source = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: Vector3<f64>,
    pub target: Vector3<f64>,
}

impl Correspondence {
    pub fn new(source: Vector3<f64>, target: Vector3<f64>) -> Self {
        Self { source, target }
    }
}

/// `E = [t]x R` for the relative pose mapping source coordinates into the target frame.
/// The translation is normalized to unit length.
pub fn essential_from_pose(rel: &Pose) -> Result<Matrix3<f64>, GeometryError> {
    let t = rel.translation();
    let n = t.norm();
    if n <= 1e-12 {
        return Err(GeometryError::DegenerateZeroBaseline);
    }
    Ok(skew(&(t / n)) * rel.rotation_matrix())
}

/// Unnormalized `[t]x R`; zero when the baseline vanishes.
pub fn essential_unnormalized(rel: &Pose) -> Matrix3<f64> {
    skew(rel.translation()) * rel.rotation_matrix()
}

/// Signed distance of a homogeneous point (third coordinate 1) to a line.
pub fn point_line_distance(x: &Vector3<f64>, l: &Vector3<f64>) -> Result<f64, GeometryError> {
    let n = (l.x * l.x + l.y * l.y).sqrt();
    if n <= f64::MIN_POSITIVE || !n.is_finite() {
        return Err(GeometryError::DegenerateLine);
    }
    Ok(l.dot(x) / n)
}

/// Sum of squared point-to-epipolar-line distances in both images.
pub fn sampson_cost(e: &Matrix3<f64>, matches: &[Correspondence]) -> Result<f64, GeometryError> {
    let mut total = 0.0;
    for m in matches {
        let (a, b) = symmetric_distances(e, m)?;
        total += a * a + b * b;
    }
    Ok(total)
}

/// `(d(x, E^T x'), d(x', E x))` for one correspondence.
pub fn symmetric_distances(e: &Matrix3<f64>, m: &Correspondence) -> Result<(f64, f64), GeometryError> {
    let x = homogenize(&m.source);
    let xp = homogenize(&m.target);
    let l_src = e.transpose() * xp;
    let l_tgt = e * x;
    Ok((point_line_distance(&x, &l_src)?, point_line_distance(&xp, &l_tgt)?))
}

/// Scales a ray so its third coordinate is 1.
pub fn homogenize(v: &Vector3<f64>) -> Vector3<f64> {
    if v.z == 1.0 {
        *v
    } else {
        v / v.z
    }
}

/// Projects a 3x3 matrix onto the essential manifold (singular values 1, 1, 0).
pub fn project_to_essential(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * vt
}

/// Similarity on homogeneous plane points: centroid to the origin, mean
/// distance sqrt(2).
fn plane_normalizer(pts: &[Vector3<f64>]) -> Matrix3<f64> {
    let n = pts.len() as f64;
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.x, y + p.y));
    let (cx, cy) = (cx / n, cy / n);
    let mean = pts.iter().map(|p| (p.x - cx).hypot(p.y - cy)).sum::<f64>() / n;
    let s = if mean > 1e-15 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Projected onto the essential manifold; see [`epipolar_eight_point`].
pub fn essential_eight_point(matches: &[Correspondence]) -> Result<Matrix3<f64>, GeometryError> {
    Ok(project_to_essential(&epipolar_eight_point(matches)?))
}

/// Linear eight-point estimate from rays (any positive scale) with rank 2
/// enforced but without the equal-singular-value constraint, which makes it
/// the better hypothesis for noisy minimal samples. When every ray has
/// positive depth the rays are moved to the image plane and conditioned
/// with a centring similarity first.
pub fn epipolar_eight_point(matches: &[Correspondence]) -> Result<Matrix3<f64>, GeometryError> {
    if matches.len() < 8 {
        return Err(GeometryError::TooFewPoints(matches.len()));
    }
    let planar = matches.iter().all(|m| m.source.z > 1e-9 && m.target.z > 1e-9);
    let (src, tgt, ts, tt): (Vec<Vector3<f64>>, Vec<Vector3<f64>>, Matrix3<f64>, Matrix3<f64>) = if planar {
        let src: Vec<_> = matches.iter().map(|m| homogenize(&m.source)).collect();
        let tgt: Vec<_> = matches.iter().map(|m| homogenize(&m.target)).collect();
        let (ts, tt) = (plane_normalizer(&src), plane_normalizer(&tgt));
        (
            src.iter().map(|x| ts * x).collect(),
            tgt.iter().map(|x| tt * x).collect(),
            ts,
            tt,
        )
    } else {
        (
            matches.iter().map(|m| m.source.normalize()).collect(),
            matches.iter().map(|m| m.target.normalize()).collect(),
            Matrix3::identity(),
            Matrix3::identity(),
        )
    };
    let mut a = DMatrix::<f64>::zeros(matches.len().max(9), 9);
    for (i, (x, y)) in src.iter().zip(&tgt).enumerate() {
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = y[r] * x[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.ok_or(GeometryError::SvdFailed)?;
    let (idx, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .ok_or(GeometryError::SvdFailed)?;
    let row = vt.row(idx);
    let e = Matrix3::from_row_slice(&row.iter().copied().collect::<Vec<_>>());
    let mut svd = (tt.transpose() * e * ts).svd(true, true);
    let k = svd.singular_values.imin();
    svd.singular_values[k] = 0.0;
    svd.recompose().map_err(|_| GeometryError::SvdFailed)
}

/// Depths `(source, target)` solving `d_t * target = d_s * R source + t` in the least-squares sense.
pub fn ray_depths(r: &Matrix3<f64>, t: &Vector3<f64>, m: &Correspondence) -> Option<(f64, f64)> {
    let a = r * m.source;
    let b = m.target;
    // minimize |d_s a - d_t b + t|^2
    let aa = a.dot(&a);
    let bb = b.dot(&b);
    let ab = a.dot(&b);
    let det = aa * bb - ab * ab;
    if det.abs() <= 1e-14 * aa * bb {
        return None;
    }
    let at = a.dot(t);
    let bt = b.dot(t);
    let ds = (-bb * at + ab * bt) / det;
    let dt = (ab * at - aa * bt) / -det;
    Some((ds, dt))
}

/// Recovers `(R, t/|t|)` from an essential matrix by cheirality voting over
/// the four candidate decompositions.
pub fn decompose_essential(
    e: &Matrix3<f64>,
    matches: &[Correspondence],
) -> Result<(Matrix3<f64>, Vector3<f64>), GeometryError> {
    if matches.len() < 5 {
        return Err(GeometryError::TooFewPoints(matches.len()));
    }
    let svd = e.svd(true, true);
    let mut u = svd.u.ok_or(GeometryError::SvdFailed)?;
    let mut vt = svd.v_t.ok_or(GeometryError::SvdFailed)?;
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    // nalgebra sorts singular values in decreasing order
    sv.sort_by(|a, b| b.total_cmp(a));
    if sv[1] <= 1e-12 * sv[0].max(1e-300) {
        return Err(GeometryError::DegenerateZeroBaseline);
    }
    if u.determinant() < 0.0 {
        u = -u;
    }
    if vt.determinant() < 0.0 {
        vt = -vt;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * vt;
    let r2 = u * w.transpose() * vt;
    let t = u.column(2).into_owned();
    let candidates = [(r1, t), (r1, -t), (r2, t), (r2, -t)];
    let mut votes: Vec<(usize, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, (r, t))| {
            let v = matches
                .iter()
                .filter(|m| matches!(ray_depths(r, t, m), Some((a, b)) if a > 0.0 && b > 0.0))
                .count();
            (v, i)
        })
        .collect();
    votes.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    if votes[0].0 == votes[1].0 {
        return Err(GeometryError::CheiralityAmbiguous);
    }
    let (r, t) = candidates[votes[0].1];
    Ok((r, t.normalize()))
}

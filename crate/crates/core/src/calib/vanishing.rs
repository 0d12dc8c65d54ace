use super::{intrinsics_matrix, CalibError, Result};
use crate::ImageId;
use nalgebra::{Matrix3, Point2, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub image: ImageId,
    pub a: Point2<f64>,
    pub b: Point2<f64>,
}

impl LineSegment {
    pub fn new(image: ImageId, a: Point2<f64>, b: Point2<f64>) -> Self {
        Self { image, a, b }
    }

    pub fn length(&self) -> f64 {
        (self.b - self.a).norm()
    }
}

/// Length-weighted least-squares vanishing point of a family of image segments.
///
/// The result is the unit 3-vector minimizing `Σ wᵢ (lᵢ · v)²` over the segment
/// lines (in Hartley-normalized coordinates, each line scaled so that `l · x`
/// is a point-line distance). Parallel families yield an ideal point with a
/// zero third coordinate. Finite points are signed with a positive third
/// coordinate; ideal points with their first non-zero coordinate positive.
pub fn fit_vanishing_point(segments: &[LineSegment]) -> Result<Vector3<f64>> {
    if segments.len() < 2 {
        return Err(CalibError::InsufficientData(format!("{} segments, need at least 2", segments.len())));
    }
    if segments.iter().any(|s| !(s.length() > 0.0)) {
        return Err(CalibError::Degenerate("segment with coincident endpoints".into()));
    }
    let endpoints: Vec<Point2<f64>> = segments.iter().flat_map(|s| [s.a, s.b]).collect();
    let norm = crate::linalg::normalize_2d(&endpoints);
    let mut scatter = Matrix3::zeros();
    for s in segments {
        let p = norm * Vector3::new(s.a.x, s.a.y, 1.0);
        let q = norm * Vector3::new(s.b.x, s.b.y, 1.0);
        let mut l = p.cross(&q);
        l /= (l.x * l.x + l.y * l.y).sqrt();
        scatter += l * l.transpose() * s.length();
    }
    let eig = SymmetricEigen::new(scatter);
    let (k, _) = eig.eigenvalues.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).expect("3 eigenvalues");
    let v_norm: Vector3<f64> = eig.eigenvectors.column(k).into_owned();
    let inv = norm.try_inverse().expect("similarity");
    let v = (inv * v_norm).normalize();
    Ok(canonical_sign(v))
}

fn canonical_sign(v: Vector3<f64>) -> Vector3<f64> {
    if is_finite_point(&v) {
        if v.z < 0.0 {
            -v
        } else {
            v
        }
    } else {
        let first = v.iter().find(|c| c.abs() > 1e-15).copied().unwrap_or(1.0);
        let mut out = if first < 0.0 { -v } else { v };
        out.z = 0.0;
        out.normalize()
    }
}

pub(crate) fn is_finite_point(v: &Vector3<f64>) -> bool {
    v.z.abs() > 1e-12 * v.norm()
}

/// Zero-skew, square-pixel intrinsics from three mutually orthogonal vanishing points.
///
/// The principal point is the orthocenter of the vanishing-point triangle and
/// `f² = −(vᵢ − c)·(vⱼ − c)` averaged over the three pairs.
pub fn intrinsics_from_vanishing_points(vx: &Vector3<f64>, vy: &Vector3<f64>, vz: &Vector3<f64>) -> Result<Matrix3<f64>> {
    intrinsics_from_vanishing_points_with_hint(vx, vy, vz, None)
}

/// As [`intrinsics_from_vanishing_points`], also accepting one ideal vanishing
/// point when a principal-point guess is supplied: the principal point is then
/// the foot of the guess on the line through the two finite points.
pub fn intrinsics_from_vanishing_points_with_hint(
    vx: &Vector3<f64>,
    vy: &Vector3<f64>,
    vz: &Vector3<f64>,
    principal_hint: Option<Point2<f64>>,
) -> Result<Matrix3<f64>> {
    let vps = [vx, vy, vz];
    let finite: Vec<Vector2<f64>> = vps.iter().filter(|v| is_finite_point(v)).map(|v| Vector2::new(v.x / v.z, v.y / v.z)).collect();
    match finite.len() {
        3 => {
            let (v1, v2, v3) = (finite[0], finite[1], finite[2]);
            let (a, b) = (v2 - v3, v1 - v3);
            let det = a.x * b.y - a.y * b.x;
            if det.abs() <= 1e-12 * a.norm() * b.norm() {
                return Err(CalibError::Degenerate("vanishing points are collinear".into()));
            }
            let rhs = Vector2::new(a.dot(&v1), b.dot(&v2));
            let c = Vector2::new((rhs.x * b.y - a.y * rhs.y) / det, (a.x * rhs.y - rhs.x * b.x) / det);
            let pairs = [(v1, v2), (v1, v3), (v2, v3)];
            let mut sum = 0.0;
            for (p, q) in pairs {
                let f2 = -(p - c).dot(&(q - c));
                if f2 <= 0.0 {
                    return Err(CalibError::Inconsistent(format!("pair gives f² = {f2}")));
                }
                sum += f2;
            }
            let f = (sum / 3.0).sqrt();
            Ok(intrinsics_matrix(f, f, c.x, c.y, 0.0))
        }
        2 => {
            let Some(h) = principal_hint else {
                return Err(CalibError::Degenerate("one vanishing point at infinity and no principal-point guess".into()));
            };
            let (v1, v2) = (finite[0], finite[1]);
            let d = v2 - v1;
            if d.norm() == 0.0 {
                return Err(CalibError::Degenerate("coincident vanishing points".into()));
            }
            let c = v1 + d * ((h.coords - v1).dot(&d) / d.norm_squared());
            let f2 = -(v1 - c).dot(&(v2 - c));
            if f2 <= 0.0 {
                return Err(CalibError::Inconsistent(format!("pair gives f² = {f2}")));
            }
            Ok(intrinsics_matrix(f2.sqrt(), f2.sqrt(), c.x, c.y, 0.0))
        }
        _ => Err(CalibError::Degenerate("more than one vanishing point at infinity".into())),
    }
}

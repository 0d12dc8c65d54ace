use super::{CalibError, Camera, Result};
use crate::linalg::{normalize_2d, normalize_3d, svd_right};
use nalgebra::{DMatrix, Matrix3, Matrix3x4, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DltOptions {
    /// Largest accepted `σ₁ / σ₁₁` of the normalized design matrix.
    pub condition_limit: f64,
    /// Smallest accepted `σ₃ / σ₁` of the centered 3D point cloud.
    pub planarity_ratio: f64,
}

impl Default for DltOptions {
    fn default() -> Self {
        Self { condition_limit: 1e10, planarity_ratio: 1e-9 }
    }
}

pub fn calibrate_dlt(points: &[(Point3<f64>, Point2<f64>)]) -> Result<Camera> {
    calibrate_dlt_with(points, &DltOptions::default())
}

/// Full camera from at least six non-coplanar 3D-2D correspondences.
pub fn calibrate_dlt_with(points: &[(Point3<f64>, Point2<f64>)], opts: &DltOptions) -> Result<Camera> {
    let p = projection_dlt(points, opts)?;
    let (k, r, t) = decompose_projection(&p)?;
    Ok(Camera::full(k, r, t))
}

/// Normalized DLT estimate of the 3×4 projection, sign fixed so that the
/// points lie in front of the camera.
pub(crate) fn projection_dlt(points: &[(Point3<f64>, Point2<f64>)], opts: &DltOptions) -> Result<Matrix3x4<f64>> {
    if points.len() < 6 {
        return Err(CalibError::InsufficientData(format!("{} correspondences, need at least 6", points.len())));
    }
    let world: Vec<Point3<f64>> = points.iter().map(|p| p.0).collect();
    let pixels: Vec<Point2<f64>> = points.iter().map(|p| p.1).collect();
    let (_, _, spread) = crate::linalg::fit_plane(&world);
    if !(spread[0] > 0.0) || spread[2] / spread[0] < opts.planarity_ratio {
        return Err(CalibError::Degenerate("3D points are coplanar".into()));
    }
    let tw = normalize_3d(&world);
    let ti = normalize_2d(&pixels);
    let mut a = DMatrix::zeros(2 * points.len(), 12);
    for (i, (x, m)) in points.iter().enumerate() {
        let xh = tw * x.to_homogeneous();
        let mh = ti * Vector3::new(m.x, m.y, 1.0);
        let (u, v, w) = (mh.x, mh.y, mh.z);
        for j in 0..4 {
            a[(2 * i, 4 + j)] = -w * xh[j];
            a[(2 * i, 8 + j)] = v * xh[j];
            a[(2 * i + 1, j)] = w * xh[j];
            a[(2 * i + 1, 8 + j)] = -u * xh[j];
        }
    }
    let (sv, vecs) = svd_right(&a);
    if !(sv[10] > 0.0) || sv[0] / sv[10] > opts.condition_limit {
        return Err(CalibError::Degenerate(format!("design matrix condition {:.3e}", sv[0] / sv[10])));
    }
    let h = vecs.column(11);
    let pn = Matrix3x4::from_fn(|r, c| h[4 * r + c]);
    let ti_inv = ti.try_inverse().ok_or_else(|| CalibError::Degenerate("pixel normalization".into()))?;
    let mut p = ti_inv * pn * tw;
    p /= p.norm();
    let front = points.iter().filter(|(x, _)| (p * x.to_homogeneous()).z > 0.0).count();
    if 2 * front < points.len() {
        p = -p;
    }
    Ok(p)
}

/// RQ factorization of `P = λ K [R | t]` with positive-diagonal `K`
/// (`K₃₃ = 1`) and a proper rotation `R`.
pub fn decompose_projection(p: &Matrix3x4<f64>) -> Result<(Matrix3<f64>, Matrix3<f64>, Vector3<f64>)> {
    let mut p = *p;
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let det = m.determinant();
    if !(det.abs() > 0.0) || !det.is_finite() {
        return Err(CalibError::Degenerate("projection has rank below 3".into()));
    }
    if det < 0.0 {
        p = -p;
        m = -m;
    }
    let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (flip * m).transpose().qr();
    let (q, r) = (qr.q(), qr.r());
    let mut k = flip * r.transpose() * flip;
    let mut rot = flip * q.transpose();
    let d = Matrix3::from_diagonal(&Vector3::new(k[(0, 0)].signum(), k[(1, 1)].signum(), k[(2, 2)].signum()));
    k *= d;
    rot = d * rot;
    if rot.determinant() < 0.0 {
        return Err(CalibError::Degenerate("improper rotation in decomposition".into()));
    }
    let kinv = k.try_inverse().ok_or_else(|| CalibError::Degenerate("singular intrinsics".into()))?;
    let t = kinv * p.column(3);
    k /= k[(2, 2)];
    Ok((k, rot, t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::intrinsics_matrix;
    use nalgebra::Rotation3;

    fn truth() -> Camera {
        let r = Rotation3::from_euler_angles(0.2, -0.4, 0.1).into_inner();
        Camera::full(intrinsics_matrix(810.0, 790.0, 330.0, 235.0, 1.5), r, Vector3::new(0.3, -0.2, 6.0))
    }

    #[test]
    fn six_exact_points() {
        let cam = truth();
        let world = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
            Point3::new(1.0, 1.0, 0.5),
            Point3::new(-0.5, 0.7, 1.2),
        ];
        let pts: Vec<_> = world.iter().map(|x| (*x, cam.project(x).unwrap())).collect();
        let est = calibrate_dlt(&pts).unwrap();
        for (x, m) in &pts {
            assert!((est.project(x).unwrap() - m).norm() < 1e-8);
        }
        assert!((est.intrinsics - cam.intrinsics).norm() < 1e-6);
        assert!(est.rotation.angle_to(&cam.rotation) < 1e-8);
        assert!((est.translation - cam.translation).norm() < 1e-7);
    }

    #[test]
    fn coplanar_points_rejected() {
        let cam = truth();
        let pts: Vec<_> = (0..6)
            .map(|i| {
                let x = Point3::new(i as f64 * 0.3, (i * i) as f64 * 0.1, 0.0);
                (x, cam.project(&x).unwrap())
            })
            .collect();
        assert!(matches!(calibrate_dlt(&pts), Err(CalibError::Degenerate(_))));
    }

    #[test]
    fn decomposition_handles_negative_scale() {
        let cam = truth();
        let (k, r, t) = decompose_projection(&(cam.projection() * -3.0)).unwrap();
        assert!((k - cam.intrinsics).norm() < 1e-9);
        assert!((r - cam.rotation_matrix()).norm() < 1e-12);
        assert!((t - cam.translation).norm() < 1e-9);
    }
}

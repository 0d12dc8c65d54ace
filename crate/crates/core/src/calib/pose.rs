use super::dlt::{projection_dlt, DltOptions};
use super::fundamental::{linear_system, symmetric_cost, FundamentalMatrix};
use super::{CalibError, Result};
use crate::linalg::{nearest_rotation, skew, svd3};
use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Matrix4, Point2, Point3, Rotation3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

/// Pose of the second camera relative to the first (`x₂ = R x₁ + t`), `‖t‖ = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    pub fn essential(&self) -> Matrix3<f64> {
        skew(&self.translation) * self.rotation
    }

    pub fn fundamental(&self, k1: &Matrix3<f64>, k2: &Matrix3<f64>) -> FundamentalMatrix {
        let k1i = k1.try_inverse().unwrap_or_else(Matrix3::identity);
        let k2i = k2.try_inverse().unwrap_or_else(Matrix3::identity);
        FundamentalMatrix::from_matrix(k2i.transpose() * self.essential() * k1i)
    }
}

/// How [`relative_pose_from_pairs`] obtained its answer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoseRoute {
    /// The 8-point system had a one-dimensional solution.
    Linear,
    /// Points and camera centers lie on a common quadric; the essential
    /// constraint selected one member of the two-parameter family.
    CriticalSurface,
}

/// Homogeneous linear triangulation from two 3×4 projections.
pub(crate) fn triangulate_homogeneous(p1: &Matrix3x4<f64>, p2: &Matrix3x4<f64>, m1: &Point2<f64>, m2: &Point2<f64>) -> Vector4<f64> {
    let mut a = Matrix4::zeros();
    for c in 0..4 {
        a[(0, c)] = m1.x * p1[(2, c)] - p1[(0, c)];
        a[(1, c)] = m1.y * p1[(2, c)] - p1[(1, c)];
        a[(2, c)] = m2.x * p2[(2, c)] - p2[(0, c)];
        a[(3, c)] = m2.y * p2[(2, c)] - p2[(1, c)];
    }
    for mut row in a.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested");
    let (k, _) = svd.singular_values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).expect("4 values");
    vt.row(k).transpose()
}

fn rt(r: &Matrix3<f64>, t: &Vector3<f64>) -> Matrix3x4<f64> {
    let mut p = Matrix3x4::zeros();
    p.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
    p.set_column(3, t);
    p
}

/// The four `(R, t)` factorizations of an essential matrix.
pub fn pose_candidates(e: &Matrix3<f64>) -> [(Matrix3<f64>, Vector3<f64>); 4] {
    let (mut u, _, mut v) = svd3(e);
    if u.determinant() < 0.0 {
        u = -u;
    }
    if v.determinant() < 0.0 {
        v = -v;
    }
    let w = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
    let r1 = u * w * v.transpose();
    let r2 = u * w.transpose() * v.transpose();
    let t: Vector3<f64> = u.column(2).into_owned();
    [(r1, t), (r1, -t), (r2, t), (r2, -t)]
}

fn cheirality_count(r: &Matrix3<f64>, t: &Vector3<f64>, normalized: &[(Point2<f64>, Point2<f64>)]) -> usize {
    let p1 = rt(&Matrix3::identity(), &Vector3::zeros());
    let p2 = rt(r, t);
    normalized
        .iter()
        .filter(|(a, b)| {
            let x = triangulate_homogeneous(&p1, &p2, a, b);
            let d1 = (p1 * x).z * x.w;
            let d2 = (p2 * x).z * x.w;
            d1 > 0.0 && d2 > 0.0
        })
        .count()
}

fn normalize_pairs(pairs: &[(Point2<f64>, Point2<f64>)], k1: &Matrix3<f64>, k2: &Matrix3<f64>) -> Result<Vec<(Point2<f64>, Point2<f64>)>> {
    let k1i = k1.try_inverse().ok_or_else(|| CalibError::Degenerate("singular intrinsics".into()))?;
    let k2i = k2.try_inverse().ok_or_else(|| CalibError::Degenerate("singular intrinsics".into()))?;
    let n = |k: &Matrix3<f64>, p: &Point2<f64>| {
        let h = k * Vector3::new(p.x, p.y, 1.0);
        Point2::new(h.x / h.z, h.y / h.z)
    };
    Ok(pairs.iter().map(|(a, b)| (n(&k1i, a), n(&k2i, b))).collect())
}

/// Second-camera pose from a fundamental matrix and both intrinsics. Of the
/// four factorizations of `E = K′ᵀ T K`, keeps the one placing the most
/// triangulated pairs in front of both cameras.
pub fn extrinsics_from_fundamental(
    t: &FundamentalMatrix,
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
    pairs: &[(Point2<f64>, Point2<f64>)],
) -> Result<RelativePose> {
    if pairs.is_empty() {
        return Err(CalibError::InsufficientData("no pairs for the cheirality test".into()));
    }
    let normalized = normalize_pairs(pairs, k1, k2)?;
    let e = k2.transpose() * t.entries * k1;
    choose_candidate(&e, &normalized)
}

fn choose_candidate(e: &Matrix3<f64>, normalized: &[(Point2<f64>, Point2<f64>)]) -> Result<RelativePose> {
    let mut scored: Vec<(usize, RelativePose)> = pose_candidates(e)
        .into_iter()
        .map(|(r, t)| (cheirality_count(&r, &t, normalized), RelativePose { rotation: r, translation: t.normalize() }))
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0));
    if scored[0].0 == 0 {
        return Err(CalibError::Degenerate("no candidate places points in front of both cameras".into()));
    }
    if scored[0].0 == scored[1].0 {
        return Err(CalibError::Ambiguous(format!("two candidates pass cheirality for {} pairs", scored[0].0)));
    }
    Ok(scored.swap_remove(0).1)
}

/// Relative pose with known intrinsics from raw pixel pairs.
///
/// Candidate fundamental matrices come from the 8-point system: its smallest
/// singular vector and, because eight box corners and two camera centers
/// always lie on one quadric, every rank-2 member of the span of its two
/// smallest singular vectors. Each candidate is factored into a pose, the
/// pose refined on the essential manifold against the symmetric epipolar
/// distance, and the lowest-cost result kept.
pub fn relative_pose_from_pairs(
    pairs: &[(Point2<f64>, Point2<f64>)],
    k1: &Matrix3<f64>,
    k2: &Matrix3<f64>,
) -> Result<(FundamentalMatrix, RelativePose, PoseRoute)> {
    if pairs.len() < 8 {
        return Err(CalibError::InsufficientData(format!("{} pairs, need at least 8", pairs.len())));
    }
    let sys = linear_system(pairs);
    let route = if sys.null_space.len() > 1 { PoseRoute::CriticalSurface } else { PoseRoute::Linear };
    if sys.null_space.len() > 2 {
        return Err(CalibError::Degenerate(format!("epipolar design matrix has a {}-dimensional null space", sys.null_space.len())));
    }
    let [f1, f2] = sys.basis;
    let mut candidates = vec![f1];
    candidates.extend(rank_deficient_members(&f1, &f2));
    let normalized = normalize_pairs(pairs, k1, k2)?;
    let k1i = k1.try_inverse().expect("checked");
    let k2i = k2.try_inverse().expect("checked");
    let mut best: Option<(f64, RelativePose)> = None;
    let mut last_err = None;
    for f in candidates {
        let e = k2.transpose() * f * k1;
        match choose_candidate(&e, &normalized) {
            Ok(pose) => {
                let pose = refine_pose(pose, pairs, &k1i, &k2i);
                let cost = symmetric_cost(&(k2i.transpose() * pose.essential() * k1i), pairs);
                if best.as_ref().is_none_or(|b| cost < b.0) {
                    best = Some((cost, pose));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    let (_, pose) = best.ok_or_else(|| last_err.unwrap_or_else(|| CalibError::Degenerate("no pose candidate".into())))?;
    Ok((pose.fundamental(k1, k2), pose, route))
}

/// Real `β` with `det(F₁ + β F₂) = 0`, plus `F₂` itself when singular.
fn rank_deficient_members(f1: &Matrix3<f64>, f2: &Matrix3<f64>) -> Vec<Matrix3<f64>> {
    let det = |b: f64| (f1 + f2 * b).determinant();
    // Exact cubic through four samples.
    let (d0, d1, dm, d2) = (det(0.0), det(1.0), det(-1.0), det(2.0));
    let a0 = d0;
    let a2 = (d1 + dm) / 2.0 - d0;
    let s = (d1 - dm) / 2.0; // a1 + a3
    let a3 = (d2 - d0 - 4.0 * a2 - 2.0 * s) / 6.0;
    let a1 = s - a3;
    let scale = a0.abs().max(a1.abs()).max(a2.abs()).max(a3.abs());
    let mut out = Vec::new();
    if scale == 0.0 {
        return out;
    }
    let mut roots = Vec::new();
    if a3.abs() > 1e-12 * scale {
        let companion = Matrix3::new(0.0, 0.0, -a0 / a3, 1.0, 0.0, -a1 / a3, 0.0, 1.0, -a2 / a3);
        for z in companion.complex_eigenvalues().iter() {
            if z.im.abs() <= 1e-7 * (1.0 + z.re.abs()) {
                roots.push(z.re);
            }
        }
    } else if a2.abs() > 1e-12 * scale {
        let disc = a1 * a1 - 4.0 * a2 * a0;
        if disc >= 0.0 {
            roots.push((-a1 + disc.sqrt()) / (2.0 * a2));
            roots.push((-a1 - disc.sqrt()) / (2.0 * a2));
        }
        out.push(*f2);
    } else {
        out.push(*f2);
    }
    out.extend(roots.into_iter().map(|b| f1 + f2 * b));
    out
}

fn pose_residuals(rot: &Matrix3<f64>, t: &Vector3<f64>, pairs: &[(Point2<f64>, Point2<f64>)], k1i: &Matrix3<f64>, k2i: &Matrix3<f64>) -> DVector<f64> {
    let f = k2i.transpose() * skew(t) * rot * k1i;
    let mut r = DVector::zeros(2 * pairs.len());
    for (i, (m, mp)) in pairs.iter().enumerate() {
        let x = Vector3::new(m.x, m.y, 1.0);
        let y = Vector3::new(mp.x, mp.y, 1.0);
        let e = y.dot(&(f * x));
        let l = f * x;
        let lp = f.transpose() * y;
        r[2 * i] = e / (l.x * l.x + l.y * l.y).sqrt().max(1e-300);
        r[2 * i + 1] = e / (lp.x * lp.x + lp.y * lp.y).sqrt().max(1e-300);
    }
    r
}

fn tangent_basis(t: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let helper = if t.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let b1 = t.cross(&helper).normalize();
    let b2 = t.cross(&b1).normalize();
    (b1, b2)
}

fn apply_step(rot: &Matrix3<f64>, t: &Vector3<f64>, d: &DVector<f64>) -> (Matrix3<f64>, Vector3<f64>) {
    let (b1, b2) = tangent_basis(t);
    let r = Rotation3::new(Vector3::new(d[0], d[1], d[2])).into_inner() * rot;
    let t = (t + b1 * d[3] + b2 * d[4]).normalize();
    (r, t)
}

/// Levenberg-Marquardt over `(R, t)` with `‖t‖ = 1`, numeric Jacobian.
fn refine_pose(pose: RelativePose, pairs: &[(Point2<f64>, Point2<f64>)], k1i: &Matrix3<f64>, k2i: &Matrix3<f64>) -> RelativePose {
    let (mut rot, mut t) = (pose.rotation, pose.translation);
    let mut r = pose_residuals(&rot, &t, pairs, k1i, k2i);
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    for _ in 0..100 {
        if cost == 0.0 {
            break;
        }
        let mut j = DMatrix::zeros(r.len(), 5);
        for k in 0..5 {
            let h = 1e-7;
            let mut d = DVector::zeros(5);
            d[k] = h;
            let (rp, tp) = apply_step(&rot, &t, &d);
            d[k] = -h;
            let (rm, tm) = apply_step(&rot, &t, &d);
            let col = (pose_residuals(&rp, &tp, pairs, k1i, k2i) - pose_residuals(&rm, &tm, pairs, k1i, k2i)) / (2.0 * h);
            j.set_column(k, &col);
        }
        let jtj = j.transpose() * &j;
        let jtr = j.transpose() * &r;
        let mut improved = false;
        while lambda < 1e10 {
            let mut damped = jtj.clone();
            for k in 0..5 {
                damped[(k, k)] += lambda * jtj[(k, k)].max(1e-12);
            }
            if let Some(ch) = damped.cholesky() {
                let step = ch.solve(&(-&jtr));
                let (rc, tc) = apply_step(&rot, &t, &step);
                let rc_res = pose_residuals(&rc, &tc, pairs, k1i, k2i);
                let c = rc_res.norm_squared();
                if c < cost {
                    let rel = (cost - c) / cost;
                    rot = nearest_rotation(&rc);
                    t = tc;
                    r = rc_res;
                    cost = c;
                    lambda = (lambda / 10.0).max(1e-12);
                    improved = rel > 1e-12;
                    break;
                }
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    RelativePose { rotation: rot, translation: t }
}

/// Pose of a camera with known intrinsics from at least six non-coplanar
/// 3D-2D correspondences: DLT in normalized image coordinates, projected onto
/// the rotation group.
pub fn resect_calibrated(k: &Matrix3<f64>, points: &[(Point3<f64>, Point2<f64>)]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    let ki = k.try_inverse().ok_or_else(|| CalibError::Degenerate("singular intrinsics".into()))?;
    let normalized: Vec<(Point3<f64>, Point2<f64>)> = points
        .iter()
        .map(|(x, m)| {
            let h = ki * Vector3::new(m.x, m.y, 1.0);
            (*x, Point2::new(h.x / h.z, h.y / h.z))
        })
        .collect();
    let p = projection_dlt(&normalized, &DltOptions::default())?;
    let mut m: Matrix3<f64> = p.fixed_view::<3, 3>(0, 0).into_owned();
    let mut col: Vector3<f64> = p.column(3).into_owned();
    if m.determinant() < 0.0 {
        m = -m;
        col = -col;
    }
    let s = m.singular_values().mean();
    Ok((nearest_rotation(&(m / s)), col / s))
}

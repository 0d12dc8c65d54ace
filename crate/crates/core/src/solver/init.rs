//! Initial values for the geometry solve.

use super::{Result, SolverError};
use crate::calib::Camera;
use crate::constraint::{ConstraintStore, VoxelBinding};
use crate::mesh::{Mesh, VertexId};
use crate::ImageId;
use nalgebra::{Matrix3, Matrix3x4, Matrix4, Point2, Point3, Rotation3, UnitQuaternion, Vector3};
use std::collections::BTreeMap;

/// Linear two-view triangulation: the null vector of the row-normalized 4×4
/// homogeneous system, dehomogenized.
pub fn triangulate(p1: &Matrix3x4<f64>, p2: &Matrix3x4<f64>, m1: &Point2<f64>, m2: &Point2<f64>) -> Result<Point3<f64>> {
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
    let mut order = [0usize, 1, 2, 3];
    order.sort_by(|x, y| svd.singular_values[*x].total_cmp(&svd.singular_values[*y]));
    let (smallest, second, largest) = (svd.singular_values[order[0]], svd.singular_values[order[1]], svd.singular_values[order[3]]);
    if second <= 1e-10 * largest {
        return Err(SolverError::AtInfinity(format!("rays do not determine a point (singular values {smallest:.3e}, {second:.3e})")));
    }
    let x = vt.row(order[0]).transpose().normalize();
    if x.w.abs() < 1e-12 {
        return Err(SolverError::AtInfinity("homogeneous weight below 1e-12".into()));
    }
    Ok(Point3::new(x.x / x.w, x.y / x.w, x.z / x.w))
}

/// Triangulates from the first two full cameras (ascending image id) in
/// which the vertex is projected.
pub fn triangulate_vertex(cameras: &BTreeMap<ImageId, Camera>, store: &ConstraintStore, v: VertexId) -> Option<Point3<f64>> {
    let obs: Vec<(&Camera, Point2<f64>)> = store
        .projections_of(v)
        .into_iter()
        .filter_map(|c| cameras.get(&c.image).filter(|cam| cam.is_full()).map(|cam| (cam, c.pixel)))
        .collect();
    if obs.len() < 2 {
        return None;
    }
    // Widest pair of views gives the best-conditioned intersection.
    let mut best: Option<(f64, Point3<f64>)> = None;
    for i in 0..obs.len() {
        for j in i + 1..obs.len() {
            let (ca, ma) = &obs[i];
            let (cb, mb) = &obs[j];
            if let Ok(x) = triangulate(&ca.projection(), &cb.projection(), ma, mb) {
                let ra = (x - ca.center()).normalize();
                let rb = (x - cb.center()).normalize();
                let angle = ra.dot(&rb).clamp(-1.0, 1.0).acos();
                if best.is_none_or(|b| angle > b.0) {
                    best = Some((angle, x));
                }
            }
        }
    }
    best.map(|b| b.1)
}

/// Similarity `y ≈ s R x + t` minimizing squared error (Umeyama).
pub fn umeyama(src: &[Point3<f64>], dst: &[Point3<f64>]) -> Option<(f64, Matrix3<f64>, Vector3<f64>)> {
    let n = src.len();
    if n < 3 || dst.len() != n {
        return None;
    }
    let mx = src.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let my = dst.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let mut cov = Matrix3::zeros();
    let mut var = 0.0;
    for (x, y) in src.iter().zip(dst) {
        let dx = x.coords - mx;
        cov += (y.coords - my) * dx.transpose();
        var += dx.norm_squared();
    }
    cov /= n as f64;
    var /= n as f64;
    if var <= 0.0 {
        return None;
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let sv = svd.singular_values;
    // Rank below 2 leaves the rotation undetermined.
    if sv.iter().filter(|s| **s > 1e-12 * sv.max()).count() < 2 {
        return None;
    }
    let r = u * d * vt;
    let s = (Matrix3::from_diagonal(&sv) * d).trace() / var;
    let t = my - s * r * mx;
    Some((s, r, t))
}

/// Pose and uniformly scaled dimensions placing the binding's canonical
/// corners on the given world points (at least three, not collinear).
pub fn fit_binding(binding: &VoxelBinding, targets: &BTreeMap<usize, Point3<f64>>) -> Option<VoxelBinding> {
    let template = binding.template();
    let src: Vec<Point3<f64>> = targets.keys().map(|i| template.local_position(*i, &binding.spec.dims)).collect();
    let dst: Vec<Point3<f64>> = targets.values().copied().collect();
    let (s, r, t) = umeyama(&src, &dst)?;
    if !(s > 0.0) || !s.is_finite() {
        return None;
    }
    let mut out = binding.clone();
    out.rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    out.translation = t;
    for d in &mut out.spec.dims {
        *d *= s;
    }
    Some(out)
}

/// Reprojection rms (pixels) of a binding's members over full cameras.
pub fn binding_rms(binding: &VoxelBinding, cameras: &BTreeMap<ImageId, Camera>, store: &ConstraintStore) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, v) in binding.members.iter().enumerate() {
        let x = binding.world_position(i);
        for c in store.projections_of(*v) {
            if let Some(cam) = cameras.get(&c.image).filter(|c| c.is_full()) {
                if let Some(u) = cam.project(&x) {
                    sum += (u - c.pixel).norm_squared();
                    n += 1;
                }
            }
        }
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// Rebuilds initial values from the calibrated views: free vertices seen
/// twice are triangulated; a binding whose corners reproject worse than
/// `rms_threshold` pixels is re-fitted to its triangulated corners.
pub fn initialize_geometry(cameras: &BTreeMap<ImageId, Camera>, mesh: &mut Mesh, store: &mut ConstraintStore, rms_threshold: f64) {
    let bound: BTreeMap<VertexId, ()> = store.bindings().flat_map(|b| b.members.iter().map(|v| (*v, ()))).collect();
    let free: Vec<VertexId> = mesh.vertex_ids().filter(|v| !bound.contains_key(v)).collect();
    for v in free {
        if let Some(x) = triangulate_vertex(cameras, store, v) {
            let _ = mesh.set_position(v, x);
        }
    }
    let voxels: Vec<_> = store.bindings().map(|b| b.voxel).collect();
    for k in voxels {
        let b = store.binding(k).expect("listed").clone();
        let good = binding_rms(&b, cameras, store).is_some_and(|r| r <= rms_threshold);
        if good {
            continue;
        }
        let targets: BTreeMap<usize, Point3<f64>> =
            b.members.iter().enumerate().filter_map(|(i, v)| triangulate_vertex(cameras, store, *v).map(|x| (i, x))).collect();
        if let Some(fitted) = fit_binding(&b, &targets) {
            fitted.apply(mesh);
            *store.binding_mut(k).expect("listed") = fitted;
        }
    }
}

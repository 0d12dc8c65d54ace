//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{DMatrix, DVector, Matrix3, Point2, Point3, Vector3};

/// Singular values (descending) and right singular vectors (as columns, same order).
///
/// Matrices with fewer rows than columns are padded with zero rows so the full
/// right null space is available.
pub fn svd_right(a: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = a.ncols();
    let padded;
    let a = if a.nrows() < n {
        let mut p = DMatrix::zeros(n, n);
        p.rows_mut(0, a.nrows()).copy_from(a);
        padded = p;
        &padded
    } else {
        a
    };
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested v_t");
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let values = order.iter().map(|&i| svd.singular_values[i]).collect();
    let mut v = DMatrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        v.set_column(k, &v_t.row(i).transpose());
    }
    (values, v)
}

/// Unit vector minimizing `|A x|`, with the sorted singular values of `A`.
pub fn null_vector(a: &DMatrix<f64>) -> (DVector<f64>, Vec<f64>) {
    let (values, v) = svd_right(a);
    let last = v.ncols() - 1;
    (v.column(last).into_owned(), values)
}

/// Full SVD of a 3x3 matrix with singular values sorted descending.
pub fn svd3(m: &Matrix3<f64>) -> (Matrix3<f64>, Vector3<f64>, Matrix3<f64>) {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u");
    let v = svd.v_t.expect("v_t").transpose();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let mut us = Matrix3::zeros();
    let mut vs = Matrix3::zeros();
    let mut s = Vector3::zeros();
    for (k, &i) in order.iter().enumerate() {
        us.set_column(k, &u.column(i));
        vs.set_column(k, &v.column(i));
        s[k] = svd.singular_values[i];
    }
    (us, s, vs)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Similarity that moves the centroid to the origin and sets the mean distance to `√2`.
pub fn normalize_2d(points: &[Point2<f64>]) -> Matrix3<f64> {
    let n = points.len().max(1) as f64;
    let c = points.iter().fold(Vector3::zeros(), |acc, p| acc + Vector3::new(p.x, p.y, 0.0)) / n;
    let mean = points
        .iter()
        .map(|p| ((p.x - c.x).powi(2) + (p.y - c.y).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    let s = if mean > 0.0 { std::f64::consts::SQRT_2 / mean } else { 1.0 };
    Matrix3::new(s, 0.0, -s * c.x, 0.0, s, -s * c.y, 0.0, 0.0, 1.0)
}

/// 4x4 similarity moving the centroid to the origin with mean distance `√3`.
pub fn normalize_3d(points: &[Point3<f64>]) -> nalgebra::Matrix4<f64> {
    let n = points.len().max(1) as f64;
    let c = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let mean = points.iter().map(|p| (p.coords - c).norm()).sum::<f64>() / n;
    let s = if mean > 0.0 { 3f64.sqrt() / mean } else { 1.0 };
    let mut t = nalgebra::Matrix4::identity() * s;
    t[(3, 3)] = 1.0;
    t[(0, 3)] = -s * c.x;
    t[(1, 3)] = -s * c.y;
    t[(2, 3)] = -s * c.z;
    t
}

/// Best-fit plane through `points`: (centroid, unit normal, singular values descending).
pub fn fit_plane(points: &[Point3<f64>]) -> (Point3<f64>, Vector3<f64>, Vector3<f64>) {
    let n = points.len() as f64;
    let c = points.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / n;
    let mut a = DMatrix::zeros(points.len().max(3), 3);
    for (i, p) in points.iter().enumerate() {
        let d = p.coords - c;
        a[(i, 0)] = d.x;
        a[(i, 1)] = d.y;
        a[(i, 2)] = d.z;
    }
    let (values, v) = svd_right(&a);
    let normal = Vector3::new(v[(0, 2)], v[(1, 2)], v[(2, 2)]);
    (Point3::from(c), normal, Vector3::new(values[0], values[1], values[2]))
}

/// Orthogonal matrix closest to `m` in Frobenius norm, with determinant +1.
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let (u, _, v) = svd3(m);
    let mut r = u * v.transpose();
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.set_column(2, &(-u.column(2)));
        r = u2 * v.transpose();
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_vector_of_wide_matrix() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let (v, s) = null_vector(&a);
        assert!((v[2].abs() - 1.0).abs() < 1e-12);
        assert_eq!(s.len(), 3);
        assert!(s[2].abs() < 1e-12);
    }

    #[test]
    fn normalization_has_unit_mean_scale() {
        let pts = [Point2::new(10.0, 10.0), Point2::new(30.0, 10.0), Point2::new(20.0, 40.0)];
        let t = normalize_2d(&pts);
        let mapped: Vec<_> = pts.iter().map(|p| t * Vector3::new(p.x, p.y, 1.0)).collect();
        let mean = mapped.iter().map(|q| (q.x * q.x + q.y * q.y).sqrt()).sum::<f64>() / 3.0;
        assert!((mean - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn nearest_rotation_is_proper() {
        let m = Matrix3::new(1.0, 0.1, 0.0, -0.1, 1.0, 0.0, 0.0, 0.0, -1.0);
        let r = nearest_rotation(&m);
        assert!((r.determinant() - 1.0).abs() < 1e-12);
        assert!((r.transpose() * r - Matrix3::identity()).norm() < 1e-12);
    }
}

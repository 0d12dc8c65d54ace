//! Synthetic scene helpers shared by the integration tests. Projection is
//! re-implemented here from scratch so that library code is checked against
//! an independent formula.
#![allow(dead_code)]

use nalgebra::{Matrix3, Point2, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct TrueCamera {
    pub k: Matrix3<f64>,
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl TrueCamera {
    /// Camera at `eye` looking at `target`, image y axis pointing down.
    pub fn look_at(f: f64, cx: f64, cy: f64, eye: Point3<f64>, target: Point3<f64>) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&Vector3::y()).normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let t = -(r * eye.coords);
        let k = Matrix3::new(f, 0.0, cx, 0.0, f, cy, 0.0, 0.0, 1.0);
        Self { k, r, t }
    }

    pub fn project(&self, x: &Point3<f64>) -> Point2<f64> {
        let c = self.r * x.coords + self.t;
        let u = self.k[(0, 0)] * c.x / c.z + self.k[(0, 1)] * c.y / c.z + self.k[(0, 2)];
        let v = self.k[(1, 1)] * c.y / c.z + self.k[(1, 2)];
        Point2::new(u, v)
    }

    /// Image of the point at infinity in world direction `d`.
    pub fn vanishing_point(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.k * self.r * d
    }

    pub fn fundamental_to(&self, other: &TrueCamera) -> Matrix3<f64> {
        // Relative motion from self to other, then F = K'^-T [t]x R K^-1.
        let r = other.r * self.r.transpose();
        let t = other.t - r * self.t;
        let tx = Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0);
        let f = other.k.try_inverse().unwrap().transpose() * tx * r * self.k.try_inverse().unwrap();
        f / f.norm()
    }

    pub fn relative_to(&self, other: &TrueCamera) -> (Matrix3<f64>, Vector3<f64>) {
        let r = other.r * self.r.transpose();
        let t = other.t - r * self.t;
        (r, t)
    }
}

pub fn default_pair() -> (TrueCamera, TrueCamera) {
    let a = TrueCamera::look_at(800.0, 320.0, 240.0, Point3::new(3.0, 2.5, 6.0), Point3::new(0.0, 0.0, 0.0));
    let b = TrueCamera::look_at(800.0, 320.0, 240.0, Point3::new(-3.5, 2.0, 5.5), Point3::new(0.0, 0.0, 0.0));
    (a, b)
}

/// Closer cameras whose images are mostly filled by points within `WIDE_HALF` of the origin.
pub fn wide_pair() -> (TrueCamera, TrueCamera) {
    let a = TrueCamera::look_at(800.0, 320.0, 240.0, Point3::new(2.1, 1.75, 4.2), Point3::new(0.0, 0.0, 0.0));
    let b = TrueCamera::look_at(800.0, 320.0, 240.0, Point3::new(-2.45, 1.4, 3.85), Point3::new(0.0, 0.0, 0.0));
    (a, b)
}

pub const WIDE_HALF: f64 = 1.2;

pub fn random_points(rng: &mut impl Rng, n: usize, half: f64) -> Vec<Point3<f64>> {
    (0..n)
        .map(|_| Point3::new(rng.random_range(-half..half), rng.random_range(-half..half), rng.random_range(-half..half)))
        .collect()
}

pub fn noisy(rng: &mut impl Rng, p: Point2<f64>, sigma: f64) -> Point2<f64> {
    if sigma == 0.0 {
        return p;
    }
    let n = Normal::new(0.0, sigma).unwrap();
    Point2::new(p.x + n.sample(rng), p.y + n.sample(rng))
}

pub fn cuboid_corners(w: f64, h: f64, d: f64) -> Vec<Point3<f64>> {
    let (x, y, z) = (w / 2.0, h / 2.0, d / 2.0);
    vec![
        Point3::new(-x, -y, z),
        Point3::new(x, -y, z),
        Point3::new(x, -y, -z),
        Point3::new(-x, -y, -z),
        Point3::new(-x, y, z),
        Point3::new(x, y, z),
        Point3::new(x, y, -z),
        Point3::new(-x, y, -z),
    ]
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Geodesic angle between two rotations, radians.
pub fn rotation_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    let m = a.transpose() * b;
    ((m.trace() - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn matrix_cosine(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a.dot(b) / (a.norm() * b.norm())).abs()
}

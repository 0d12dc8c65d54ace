//! Synthetic photographs of meshes, for demos and tests.

use crate::calib::Camera;
use crate::mesh::{FaceId, Mesh};
use image::{Rgba, RgbaImage};
use nalgebra::{Point3, Vector3};

/// Nearest face hit by the ray `o + t d`, `t > 0`, with its hit point.
pub fn cast_ray(mesh: &Mesh, o: &Point3<f64>, d: &Vector3<f64>) -> Option<(FaceId, Point3<f64>)> {
    let mut best: Option<(f64, FaceId)> = None;
    for f in mesh.face_ids() {
        let pts = mesh.face_positions(f);
        for k in 1..pts.len().saturating_sub(1) {
            let (a, b, c) = (pts[0], pts[k], pts[k + 1]);
            let e1 = b - a;
            let e2 = c - a;
            let p = d.cross(&e2);
            let det = e1.dot(&p);
            if det.abs() < 1e-14 {
                continue;
            }
            let s = o - a;
            let u = s.dot(&p) / det;
            let q = s.cross(&e1);
            let v = d.dot(&q) / det;
            if u < 0.0 || v < 0.0 || u + v > 1.0 {
                continue;
            }
            let t = e2.dot(&q) / det;
            if t > 1e-9 && best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, f));
            }
        }
    }
    best.map(|(t, f)| (f, o + d * t))
}

/// Renders `mesh` through `camera`, one ray per pixel center. Pixels that
/// hit nothing get `background`.
pub fn render(mesh: &Mesh, camera: &Camera, width: u32, height: u32, background: [u8; 4], shade: impl Fn(FaceId, &Point3<f64>) -> [u8; 4]) -> RgbaImage {
    let k_inv = camera.intrinsics.try_inverse().expect("invertible intrinsics");
    let rt = camera.rotation_matrix().transpose();
    let o = camera.center();
    RgbaImage::from_fn(width, height, |i, j| {
        let d = rt * (k_inv * Vector3::new(i as f64 + 0.5, j as f64 + 0.5, 1.0));
        let c = cast_ray(mesh, &o, &d).map_or(background, |(f, p)| shade(f, &p));
        Rgba(c)
    })
}

/// A 3D checkerboard with cells of side `cell`, tinted per face.
pub fn checker_shader(cell: f64) -> impl Fn(FaceId, &Point3<f64>) -> [u8; 4] {
    move |f: FaceId, p: &Point3<f64>| {
        let parity = ((p.x / cell).floor() + (p.y / cell).floor() + (p.z / cell).floor()) as i64 & 1;
        let tint = (f.0 as u64).wrapping_mul(2654435761) as u32;
        let base = [(tint & 0xff) as u8, ((tint >> 8) & 0xff) as u8, ((tint >> 16) & 0xff) as u8];
        let k = if parity == 0 { 1.0 } else { 0.35 };
        [(base[0] as f64 * k) as u8 | 0x20, (base[1] as f64 * k) as u8 | 0x20, (base[2] as f64 * k) as u8 | 0x20, 255]
    }
}

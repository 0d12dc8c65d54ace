//! Texture recovery: per-face homographies into the source photographs,
//! view scoring, inverse warping and atlas assembly.

mod atlas;
mod warp;

pub use atlas::{build_atlas, pack_skyline, Atlas, AtlasOptions, Chart, PackedRect, MAX_ATLAS_SIDE, PLACEHOLDER_COLOR};
pub use warp::{extract_face_texture, sample_bilinear};

use crate::calib::Camera;
use crate::mesh::{FaceId, Mesh};
use crate::ImageId;
use nalgebra::{Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TextureError {
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("face {0} is not planar (residual {1:.3e})")]
    NotPlanar(FaceId, f64),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("camera for {0} is not calibrated")]
    NotCalibrated(ImageId),
    #[error("not ready: {0}")]
    NotReady(String),
}

impl TextureError {
    pub fn kind(&self) -> &'static str {
        match self {
            TextureError::Degenerate(_) => "Degenerate",
            TextureError::NotPlanar(..) => "NotPlanar",
            TextureError::NotFound(_) => "NotFound",
            TextureError::NotCalibrated(_) => "NotCalibrated",
            TextureError::NotReady(_) => "NotReady",
        }
    }
}

pub type Result<T> = std::result::Result<T, TextureError>;

/// Planarity tolerance relative to the face diameter.
pub const PLANARITY_TOLERANCE: f64 = 1e-6;

/// Orthonormal 2D frame in a face plane: origin at the first corner, x along
/// the first edge, y completing a right-handed basis with the outward normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChartFrame {
    pub origin: Point3<f64>,
    pub x: Vector3<f64>,
    pub y: Vector3<f64>,
    pub normal: Vector3<f64>,
}

impl ChartFrame {
    pub fn of_face(mesh: &Mesh, face: FaceId) -> Result<Self> {
        let pts = mesh.face_positions(face);
        if pts.len() < 3 {
            return Err(TextureError::NotFound(face.to_string()));
        }
        let normal = mesh.face_normal(face).ok_or_else(|| TextureError::Degenerate(format!("{face} has zero area")))?;
        let edge = pts[1] - pts[0];
        let x = edge - normal * normal.dot(&edge);
        if x.norm() <= 1e-15 * (1.0 + edge.norm()) {
            return Err(TextureError::Degenerate(format!("{face} has a zero-length first edge")));
        }
        let x = x.normalize();
        let y = normal.cross(&x);
        Ok(Self { origin: pts[0], x, y, normal })
    }

    pub fn to_chart(&self, p: &Point3<f64>) -> Point2<f64> {
        let d = p - self.origin;
        Point2::new(d.dot(&self.x), d.dot(&self.y))
    }

    pub fn to_world(&self, q: &Point2<f64>) -> Point3<f64> {
        self.origin + self.x * q.x + self.y * q.y
    }
}

/// Corners of a face in its chart frame.
pub fn face_chart_corners(mesh: &Mesh, face: FaceId, frame: &ChartFrame) -> Vec<Point2<f64>> {
    mesh.face_positions(face).iter().map(|p| frame.to_chart(p)).collect()
}

fn check_planar(mesh: &Mesh, face: FaceId) -> Result<()> {
    let pts = mesh.face_positions(face);
    let diameter = pts.iter().flat_map(|a| pts.iter().map(move |b| (a - b).norm())).fold(0.0, f64::max);
    let residual = mesh.planarity_residual(face).ok_or_else(|| TextureError::NotFound(face.to_string()))?;
    if residual > PLANARITY_TOLERANCE * diameter.max(f64::MIN_POSITIVE) {
        return Err(TextureError::NotPlanar(face, residual));
    }
    Ok(())
}

/// Homography from the face's chart frame to image pixels,
/// `H = K [R x | R y | R o + t]`.
pub fn face_homography(camera: &Camera, face: FaceId, mesh: &Mesh) -> Result<Matrix3<f64>> {
    if !mesh.contains_face(face) {
        return Err(TextureError::NotFound(face.to_string()));
    }
    check_planar(mesh, face)?;
    let frame = ChartFrame::of_face(mesh, face)?;
    homography_of_frame(camera, &frame)
}

pub(crate) fn homography_of_frame(camera: &Camera, frame: &ChartFrame) -> Result<Matrix3<f64>> {
    let r = camera.rotation_matrix();
    let m = Matrix3::from_columns(&[r * frame.x, r * frame.y, r * frame.origin.coords + camera.translation]);
    let h = camera.intrinsics * m;
    // The plane passes through the center exactly when det vanishes.
    let offset = frame.normal.dot(&(camera.center() - frame.origin));
    let scale = (camera.center() - frame.origin).norm().max(1.0);
    if offset.abs() <= 1e-12 * scale || h.try_inverse().is_none() {
        return Err(TextureError::Degenerate("face plane passes through the camera center".into()));
    }
    Ok(h)
}

pub fn apply_homography(h: &Matrix3<f64>, q: &Point2<f64>) -> Point2<f64> {
    let p = h * Vector3::new(q.x, q.y, 1.0);
    Point2::new(p.x / p.z, p.y / p.z)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub face: FaceId,
    pub image: ImageId,
    pub visible: bool,
    pub cos_angle: f64,
    pub projected_area: f64,
    pub score: f64,
}

/// Signed area of a polygon (shoelace).
pub fn polygon_area(pts: &[Point2<f64>]) -> f64 {
    let n = pts.len();
    (0..n).map(|i| pts[i].x * pts[(i + 1) % n].y - pts[(i + 1) % n].x * pts[i].y).sum::<f64>() / 2.0
}

/// Points tested for visibility: the centroid and the midpoints between it
/// and each corner.
pub fn visibility_samples(mesh: &Mesh, face: FaceId) -> Vec<Point3<f64>> {
    let pts = mesh.face_positions(face);
    let Some(c) = mesh.face_centroid(face) else { return vec![] };
    std::iter::once(c).chain(pts.iter().map(|p| Point3::from((p.coords + c.coords) / 2.0))).collect()
}

/// Whether the open segment from `a` to `b` crosses face `f` (fan triangulation).
pub fn segment_hits_face(mesh: &Mesh, f: FaceId, a: &Point3<f64>, b: &Point3<f64>) -> bool {
    let pts = mesh.face_positions(f);
    let d = b - a;
    let len = d.norm();
    for k in 1..pts.len().saturating_sub(1) {
        if let Some(t) = segment_triangle(a, &d, &pts[0], &pts[k], &pts[k + 1]) {
            let margin = 1e-9 * (1.0 + len);
            if t * len > margin && (1.0 - t) * len > margin {
                return true;
            }
        }
    }
    false
}

/// Moller-Trumbore; returns the segment parameter of the hit.
fn segment_triangle(o: &Point3<f64>, d: &Vector3<f64>, a: &Point3<f64>, b: &Point3<f64>, c: &Point3<f64>) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = d.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 * e1.norm() * e2.norm() * d.norm() {
        return None;
    }
    let s = o - a;
    let u = s.dot(&p) / det;
    if !(0.0..=1.0).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = d.dot(&q) / det;
    if v < 0.0 || u + v > 1.0 {
        return None;
    }
    Some(e2.dot(&q) / det)
}

/// Ray-cast visibility: every sample must be in front of the camera and
/// reach its center without crossing another face.
pub fn is_visible(camera: &Camera, face: FaceId, mesh: &Mesh) -> bool {
    let center = camera.center();
    if mesh.face_positions(face).iter().any(|p| camera.to_camera(p).z <= 0.0) {
        return false;
    }
    let samples = visibility_samples(mesh, face);
    !samples.is_empty() && samples.iter().all(|s| mesh.face_ids().filter(|g| *g != face).all(|g| !segment_hits_face(mesh, g, s, &center)))
}

pub fn score_view(camera: &Camera, image: ImageId, face: FaceId, mesh: &Mesh) -> ViewScore {
    let mut out = ViewScore { face, image, visible: false, cos_angle: 0.0, projected_area: 0.0, score: 0.0 };
    let (Some(n), Some(c)) = (mesh.face_normal(face), mesh.face_centroid(face)) else { return out };
    if !camera.is_full() {
        return out;
    }
    let to_cam = camera.center() - c;
    if to_cam.norm() > 0.0 {
        out.cos_angle = n.dot(&to_cam.normalize()).clamp(-1.0, 1.0);
    }
    out.visible = is_visible(camera, face, mesh);
    if out.visible {
        let projected: Option<Vec<Point2<f64>>> = mesh.face_positions(face).iter().map(|p| camera.project(p)).collect();
        out.projected_area = projected.map_or(0.0, |p| polygon_area(&p).abs());
    }
    if out.visible && out.cos_angle > 0.0 {
        out.score = out.cos_angle * out.projected_area;
    }
    out
}

//! Derived state: cameras, solved geometry and the reference scale. Never
//! journaled; recomputed after every operator from the model alone.

use super::model::{LineAnnotation, Model};
use crate::calib::{
    fit_vanishing_point, intrinsics_from_vanishing_points_with_hint, relative_pose_from_pairs, resect_calibrated, Axis, Camera, CameraStatus,
    LineSegment, PoseRoute,
};
use crate::solver::{initialize_geometry, solve_geometry, triangulate_vertex, SolveProblem, SolveReport};
use crate::ImageId;
use nalgebra::{Matrix3, Point2, Point3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Shared projections an image pair needs before cameras are recovered.
pub const MIN_SHARED: usize = 8;
/// Corner projections an image needs before voxel edges yield intrinsics.
pub const MIN_CORNERS: usize = 4;
/// Binding reprojection rms (pixels) above which a voxel is re-initialized.
pub const INIT_RMS_THRESHOLD: f64 = 5.0;
const MIN_RESECTION_POINTS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntrinsicsSource {
    Lines,
    VoxelEdges,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageCalibration {
    pub source: Option<IntrinsicsSource>,
    pub focal: Option<f64>,
    pub principal_point: Option<Point2<f64>>,
    /// Why intrinsics or pose are missing.
    pub note: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub images: BTreeMap<ImageId, ImageCalibration>,
    /// Image pair whose epipolar geometry fixed the frame (first camera at the origin).
    pub reference_pair: Option<(ImageId, ImageId)>,
    pub route: Option<PoseRoute>,
    pub shared_projections: usize,
    pub runs: usize,
}

/// What calibration depends on. A change triggers recalibration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationKey {
    images: Vec<(ImageId, u32, u32)>,
    pairs: Vec<(ImageId, ImageId, usize)>,
    lines: usize,
}

impl CalibrationKey {
    pub fn of(model: &Model) -> Self {
        let images: Vec<(ImageId, u32, u32)> = model.images.values().map(|e| (e.id, e.width, e.height)).collect();
        let mut pairs = Vec::new();
        for (i, a) in images.iter().enumerate() {
            for b in &images[i + 1..] {
                let n = model.store.shared_vertices(a.0, b.0).len();
                if n >= MIN_SHARED {
                    pairs.push((a.0, b.0, n));
                }
            }
        }
        Self { images, pairs, lines: model.lines.len() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Derived {
    pub cameras: BTreeMap<ImageId, Camera>,
    pub calibration: CalibrationReport,
    pub calibration_key: CalibrationKey,
    pub solve: Option<SolveReport>,
    /// Error of the last attempted solve, if it failed.
    pub solve_error: Option<String>,
}

/// What a flush did, for change notifications.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlushOutcome {
    pub calibrated: bool,
    pub solved: bool,
}

fn image_center(model: &Model, id: ImageId) -> Point2<f64> {
    let e = &model.images[&id];
    Point2::new(e.width as f64 / 2.0, e.height as f64 / 2.0)
}

fn intrinsics_from_families(families: &[Vec<LineSegment>; 3], hint: Point2<f64>) -> Result<Matrix3<f64>, String> {
    let mut vps = Vec::with_capacity(3);
    for (axis, fam) in Axis::ALL.iter().zip(families) {
        if fam.len() < 2 {
            return Err(format!("{} segments along {axis:?}, need 2", fam.len()));
        }
        vps.push(fit_vanishing_point(fam).map_err(|e| e.to_string())?);
    }
    intrinsics_from_vanishing_points_with_hint(&vps[0], &vps[1], &vps[2], Some(hint)).map_err(|e| e.to_string())
}

fn line_families(lines: &[LineAnnotation], image: ImageId) -> [Vec<LineSegment>; 3] {
    let mut out: [Vec<LineSegment>; 3] = Default::default();
    for l in lines.iter().filter(|l| l.image == image) {
        out[l.axis.index()].push(LineSegment::new(image, Point2::new(l.x1, l.y1), Point2::new(l.x2, l.y2)));
    }
    out
}

/// Axis-parallel voxel edges with both corners projected into `image`, from
/// the lowest-id voxel that has at least two per axis.
fn voxel_edge_families(model: &Model, image: ImageId) -> Option<[Vec<LineSegment>; 3]> {
    let pixels = model.store.pixels_in(image);
    for b in model.store.bindings() {
        let corners = b.members.iter().filter(|v| pixels.contains_key(v)).count();
        if corners < MIN_CORNERS {
            continue;
        }
        let template = b.template();
        let mut fams: [Vec<LineSegment>; 3] = Default::default();
        for (axis, fam) in fams.iter_mut().enumerate() {
            for (i, j) in template.axis_edges(axis) {
                if let (Some(p), Some(q)) = (pixels.get(&b.members[i]), pixels.get(&b.members[j])) {
                    fam.push(LineSegment::new(image, *p, *q));
                }
            }
        }
        if fams.iter().all(|f| f.len() >= 2) {
            return Some(fams);
        }
    }
    None
}

/// Recovers cameras from the model: intrinsics per image from the user's line
/// annotations (preferred) or the projected voxel edges, the first image pair
/// with enough shared projections from its epipolar geometry, and every other
/// image by resection against triangulated vertices.
pub fn calibrate(model: &Model) -> (BTreeMap<ImageId, Camera>, CalibrationReport) {
    let mut cameras = BTreeMap::new();
    let mut report = CalibrationReport::default();
    let mut intrinsics = BTreeMap::new();
    for (&id, e) in &model.images {
        cameras.insert(id, Camera::uncalibrated(e.width, e.height));
        let mut info = ImageCalibration::default();
        let hint = image_center(model, id);
        let user = line_families(&model.lines, id);
        let attempt = if user.iter().any(|f| !f.is_empty()) {
            Some((IntrinsicsSource::Lines, intrinsics_from_families(&user, hint)))
        } else {
            voxel_edge_families(model, id).map(|f| (IntrinsicsSource::VoxelEdges, intrinsics_from_families(&f, hint)))
        };
        match attempt {
            Some((source, Ok(k))) if k.iter().all(|x| x.is_finite()) => {
                info.source = Some(source);
                info.focal = Some(k[(0, 0)]);
                info.principal_point = Some(Point2::new(k[(0, 2)], k[(1, 2)]));
                intrinsics.insert(id, k);
                let cam = cameras.get_mut(&id).expect("inserted");
                cam.intrinsics = k;
                cam.status = CameraStatus::IntrinsicsOnly;
            }
            Some((_, Err(msg))) => info.note = Some(msg),
            Some((_, Ok(_))) => info.note = Some("non-finite intrinsics".into()),
            None => info.note = Some("no line annotations or projected voxel edges".into()),
        }
        report.images.insert(id, info);
    }

    let ids: Vec<ImageId> = intrinsics.keys().copied().collect();
    'pairs: for (i, a) in ids.iter().enumerate() {
        for b in &ids[i + 1..] {
            let pairs = model.store.derive_epipolar_pairs(*a, *b);
            if pairs.len() < MIN_SHARED {
                continue;
            }
            match relative_pose_from_pairs(&pairs, &intrinsics[a], &intrinsics[b]) {
                Ok((_, pose, route)) => {
                    cameras.insert(*a, Camera::full(intrinsics[a], Matrix3::identity(), Vector3::zeros()));
                    cameras.insert(*b, Camera::full(intrinsics[b], pose.rotation, pose.translation));
                    report.reference_pair = Some((*a, *b));
                    report.route = Some(route);
                    report.shared_projections = pairs.len();
                    break 'pairs;
                }
                Err(e) => {
                    report.images.get_mut(b).expect("listed").note = Some(format!("pose against {a}: {e}"));
                }
            }
        }
    }

    if report.reference_pair.is_some() {
        // Resect the rest until nothing changes, in id order.
        loop {
            let mut progressed = false;
            for id in &ids {
                if cameras[id].is_full() {
                    continue;
                }
                let full: BTreeMap<ImageId, Camera> = cameras.iter().filter(|(_, c)| c.is_full()).map(|(k, c)| (*k, c.clone())).collect();
                let pts: Vec<(Point3<f64>, Point2<f64>)> = model
                    .store
                    .projections_in(*id)
                    .iter()
                    .filter_map(|p| triangulate_vertex(&full, &model.store, p.vertex).map(|x| (x, p.pixel)))
                    .collect();
                if pts.len() < MIN_RESECTION_POINTS {
                    report.images.get_mut(id).expect("listed").note = Some(format!("{} triangulated points, need {MIN_RESECTION_POINTS}", pts.len()));
                    continue;
                }
                match resect_calibrated(&intrinsics[id], &pts) {
                    Ok((r, t)) => {
                        cameras.insert(*id, Camera::full(intrinsics[id], r, t));
                        progressed = true;
                    }
                    Err(e) => report.images.get_mut(id).expect("listed").note = Some(format!("resection: {e}")),
                }
            }
            if !progressed {
                break;
            }
        }
    }
    (cameras, report)
}

/// Scales every world quantity by `s` about the origin. Pixels are unchanged.
pub fn scale_world(model: &mut Model, cameras: &mut BTreeMap<ImageId, Camera>, s: f64) {
    let ids: Vec<_> = model.mesh.vertex_ids().collect();
    for v in ids {
        let p = model.mesh.position(v).expect("live");
        let _ = model.mesh.set_position(v, Point3::from(p.coords * s));
    }
    for b in model.store.bindings_mut() {
        b.translation *= s;
        for d in &mut b.spec.dims {
            *d *= s;
        }
    }
    for c in cameras.values_mut() {
        c.translation *= s;
    }
}

/// Applies the reference length, if set and measurable. Returns the factor used.
pub fn enforce_reference(model: &mut Model, cameras: &mut BTreeMap<ImageId, Camera>) -> Option<f64> {
    let r = model.reference?;
    let d = (model.mesh.position(r.a)? - model.mesh.position(r.b)?).norm();
    if !(d > 0.0) || !d.is_finite() {
        return None;
    }
    let s = r.length / d;
    if s != 1.0 {
        scale_world(model, cameras, s);
    }
    Some(s)
}

impl Derived {
    /// Brings derived state up to date after an operator.
    pub fn flush(&mut self, model: &mut Model, auto_solve: bool) -> FlushOutcome {
        let mut out = FlushOutcome::default();
        let key = CalibrationKey::of(model);
        if key != self.calibration_key {
            let runs = self.calibration.runs;
            let (cameras, mut report) = calibrate(model);
            report.runs = runs + 1;
            self.cameras = cameras;
            self.calibration = report;
            self.calibration_key = key;
            out.calibrated = true;
            if self.cameras.values().any(Camera::is_full) {
                initialize_geometry(&self.cameras, &mut model.mesh, &mut model.store, INIT_RMS_THRESHOLD);
            }
        }
        if (out.calibrated || auto_solve) && self.cameras.values().any(Camera::is_full) {
            let problem = SolveProblem { cameras: &self.cameras, mesh: &model.mesh, store: &model.store, options: &model.solve_options };
            match solve_geometry(&problem) {
                Ok(outcome) => {
                    outcome.apply(&mut model.mesh, &mut model.store);
                    self.solve = Some(outcome.report);
                    self.solve_error = None;
                }
                Err(e) => {
                    self.solve_error = Some(e.to_string());
                }
            }
            out.solved = true;
        }
        enforce_reference(model, &mut self.cameras);
        out
    }

    pub fn full_cameras(&self) -> usize {
        self.cameras.values().filter(|c| c.is_full()).count()
    }
}

//! Scripted synthetic sessions: a known scene photographed by known cameras,
//! and the operator journal a user would enter to model it.

use crate::calib::{intrinsics_matrix, Camera};
use crate::constraint::{SpatialKind, SpatialRefs};
use crate::mesh::{EdgeId, Mesh, PrimitiveSpec, VertexId};
use crate::session::{Model, Op, Pose};
use crate::synth::{checker_shader, render};
use nalgebra::{Isometry3, Matrix3, Point2, Point3, Vector3};
use sha2::{Digest, Sha256};

pub const WIDTH: u32 = 640;
pub const HEIGHT: u32 = 480;
pub const FOCAL: f64 = 800.0;
pub const NAMES: [&str; 2] = ["cuboid", "pavilion"];

/// True box dimensions of both scenes.
pub const BOX_DIMS: [f64; 3] = [2.0, 1.2, 1.5];
/// Height of the pavilion ridge above the box top.
pub const RIDGE_RISE: f64 = 0.6;

pub struct DemoScene {
    pub name: &'static str,
    pub cameras: Vec<Camera>,
    /// Ground-truth geometry in the scene frame.
    pub truth: Mesh,
    /// PNG files, one per camera.
    pub images: Vec<Vec<u8>>,
    pub ops: Vec<Op>,
    /// Corner pair whose true distance the script fixes as the scale.
    pub reference: (VertexId, VertexId, f64),
}

/// Camera at `center` looking at `target`, image y pointing away from world +y.
pub fn look_at(center: Point3<f64>, target: Point3<f64>) -> Camera {
    let z = (target - center).normalize();
    let x = z.cross(&Vector3::y()).normalize();
    let y = z.cross(&x);
    let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    let k = intrinsics_matrix(FOCAL, FOCAL, WIDTH as f64 / 2.0, HEIGHT as f64 / 2.0, 0.0);
    Camera::full(k, r, -(r * center.coords))
}

fn scene_cameras() -> Vec<Camera> {
    let target = Point3::new(0.0, 0.2, 0.0);
    vec![look_at(Point3::new(3.2, 2.6, -5.6), target), look_at(Point3::new(-3.8, 2.2, -5.0), target)]
}

fn png(img: &image::RgbaImage) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

fn photographs(truth: &Mesh, cameras: &[Camera]) -> Vec<Vec<u8>> {
    cameras.iter().map(|c| png(&render(truth, c, WIDTH, HEIGHT, [24, 28, 36, 255], checker_shader(0.25)))).collect()
}

fn add_image_ops(images: &[Vec<u8>]) -> Vec<Op> {
    images
        .iter()
        .map(|bytes| {
            let sha = hex::encode(Sha256::digest(bytes));
            Op::AddImage { path: format!("images/{sha}.png"), width: WIDTH, height: HEIGHT, sha256: sha }
        })
        .collect()
}

/// Applies `op` to the scratch model used to learn ids, and records it.
fn push(model: &mut Model, ops: &mut Vec<Op>, op: Op) {
    model.apply(&op).unwrap_or_else(|e| panic!("demo script step {} ({}) failed: {e}", ops.len(), op.name()));
    ops.push(op);
}

fn project_all(model: &mut Model, ops: &mut Vec<Op>, cameras: &[Camera], vertices: &[(VertexId, Point3<f64>)]) {
    for (i, cam) in cameras.iter().enumerate() {
        for (v, x) in vertices {
            let p: Point2<f64> = cam.project(x).expect("in front of the camera");
            push(model, ops, Op::AddProjection { vertex: *v, image: crate::ImageId(i as u32), pixel: p, weight: 1.0 });
        }
    }
}

fn box_truth() -> (Mesh, Vec<Point3<f64>>) {
    let spec = PrimitiveSpec::cuboid(BOX_DIMS[0], BOX_DIMS[1], BOX_DIMS[2]);
    let mut mesh = Mesh::new();
    let ids = mesh.add_primitive(&spec, &Isometry3::identity()).expect("valid cuboid");
    let corners = ids.vertices.iter().map(|v| mesh.position(*v).expect("live")).collect();
    (mesh, corners)
}

/// The box script shared by both scenes: two photographs, a unit cube placed
/// by eye, its eight corners dragged onto both images, and one edge fixed to
/// its true length.
fn box_script(images: &[Vec<u8>], cameras: &[Camera], corners: &[Point3<f64>]) -> (Model, Vec<Op>, Vec<VertexId>) {
    let mut model = Model::new();
    let mut ops = Vec::new();
    for op in add_image_ops(images) {
        push(&mut model, &mut ops, op);
    }
    push(&mut model, &mut ops, Op::KCreate { spec: PrimitiveSpec::cuboid(1.0, 1.0, 1.0), pose: Pose { translation: [0.1, 0.0, -0.2], rotation: [0.0, 0.15, 0.0], quaternion: None } });
    let members = model.store.bindings().next().expect("bound").members.clone();
    let targets: Vec<(VertexId, Point3<f64>)> = members.iter().copied().zip(corners.iter().copied()).collect();
    project_all(&mut model, &mut ops, cameras, &targets);
    push(&mut model, &mut ops, Op::SetReferenceLength { a: members[0], b: members[1], length: BOX_DIMS[0] });
    (model, ops, members)
}

pub fn cuboid_two_view() -> DemoScene {
    let cameras = scene_cameras();
    let (truth, corners) = box_truth();
    let images = photographs(&truth, &cameras);
    let (_, ops, members) = box_script(&images, &cameras, &corners);
    DemoScene { name: "cuboid", cameras, truth, images, ops, reference: (members[0], members[1], BOX_DIMS[0]) }
}

fn edge(model: &Model, a: VertexId, b: VertexId) -> EdgeId {
    model.mesh.find_edge(a, b).expect("adjacent corners")
}

/// The box with a ridge roof: the two top edges along x are split at their
/// midpoints, the new vertices joined and lifted by their projections, and
/// the faces kept planar by coplanarity constraints.
pub fn pavilion() -> DemoScene {
    let cameras = scene_cameras();
    let (mut truth, corners) = box_truth();
    let (h, d) = (BOX_DIMS[1], BOX_DIMS[2]);
    let ridge_front = Point3::new(0.0, h / 2.0 + RIDGE_RISE, -d / 2.0);
    let ridge_back = Point3::new(0.0, h / 2.0 + RIDGE_RISE, d / 2.0);
    {
        let v = |i: usize| VertexId(i as u32);
        let (m1, _) = truth.e_split(truth.find_edge(v(3), v(2)).expect("edge"), 0.5).expect("split");
        let (m2, _) = truth.e_split(truth.find_edge(v(7), v(6)).expect("edge"), 0.5).expect("split");
        truth.set_position(m1, ridge_front).expect("live");
        truth.set_position(m2, ridge_back).expect("live");
        truth.v_connect(m1, m2).expect("shared top face");
    }
    let images = photographs(&truth, &cameras);
    let (mut model, mut ops, k) = box_script(&images, &cameras, &corners);

    let e_front = edge(&model, k[3], k[2]);
    push(&mut model, &mut ops, Op::ESplit { edge: e_front, t: 0.5, at: None });
    let m1 = model.mesh.vertex_ids().last().expect("new vertex");
    let e_back = edge(&model, k[7], k[6]);
    push(&mut model, &mut ops, Op::ESplit { edge: e_back, t: 0.5, at: None });
    let m2 = model.mesh.vertex_ids().last().expect("new vertex");
    push(&mut model, &mut ops, Op::VConnect { a: m1, b: m2, face: None });
    project_all(&mut model, &mut ops, &cameras, &[(m1, ridge_front), (m2, ridge_back)]);
    let coplanar = [
        vec![k[0], k[1], k[2], m1, k[3]],
        vec![k[4], k[5], k[6], m2, k[7]],
        vec![k[3], m1, m2, k[7]],
        vec![m1, k[2], k[6], m2],
    ];
    for vs in coplanar {
        push(&mut model, &mut ops, Op::AddSpatial { kind: SpatialKind::Coplanar, refs: SpatialRefs::Vertices(vs) });
    }
    DemoScene { name: "pavilion", cameras, truth, images, ops, reference: (k[0], k[1], BOX_DIMS[0]) }
}

pub fn by_name(name: &str) -> Option<DemoScene> {
    match name {
        "cuboid" => Some(cuboid_two_view()),
        "pavilion" => Some(pavilion()),
        _ => None,
    }
}

impl DemoScene {
    /// Writes the photographs under `dir/images/` and runs the script in a
    /// session rooted at `dir`.
    pub fn run_in(&self, dir: &std::path::Path) -> crate::session::Result<crate::session::Session> {
        std::fs::create_dir_all(dir.join("images"))?;
        for (op, bytes) in self.ops.iter().zip(&self.images) {
            if let Op::AddImage { path, .. } = op {
                std::fs::write(dir.join(path), bytes)?;
            }
        }
        let mut s = crate::session::Session::with_root(dir);
        s.apply_all(self.ops.iter().cloned())?;
        Ok(s)
    }

    /// Runs the script in memory, with the photographs attached.
    pub fn run(&self) -> crate::session::Result<crate::session::Session> {
        let mut s = crate::session::Session::new();
        s.apply_all(self.ops.iter().cloned())?;
        for (i, bytes) in self.images.iter().enumerate() {
            let img = image::load_from_memory(bytes).map_err(|e| crate::session::SessionError::Image(e.to_string()))?.to_rgba8();
            s.attach_pixels(crate::ImageId(i as u32), img)?;
        }
        Ok(s)
    }
}

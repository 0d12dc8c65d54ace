//! Sessions: an ordered operator journal over the model, with undo,
//! deterministic replay, project persistence and export.

mod derive;
mod model;
mod project;

pub use derive::{calibrate, enforce_reference, scale_world, CalibrationKey, CalibrationReport, Derived, FlushOutcome, ImageCalibration, IntrinsicsSource, INIT_RMS_THRESHOLD, MIN_CORNERS, MIN_SHARED};
pub use model::{ImageEntry, LineAnnotation, Model, ModelMarks, Op, Pose, ReferenceLength};
pub use project::{parse_op_input, read_journal, write_journal, ExportReport, ProjectFile, ProjectWarning, JOURNAL_FILE, PROJECT_FILE, PROJECT_FORMAT_VERSION};

use crate::calib::{CalibError, Camera};
use crate::constraint::{ConstraintError, ConstraintId, DiagnosisReport, VoxelId};
use crate::mesh::{EdgeId, FaceId, MeshError, VertexId};
use crate::solver::{SolveReport, SolverError};
use crate::texture::{AtlasOptions, TextureError};
use crate::ImageId;
use image::RgbaImage;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Texture(#[from] TextureError),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("degenerate: {0}")]
    Degenerate(String),
    #[error("still referenced: {0}")]
    StillReferenced(String),
    #[error("invalid operator: {0}")]
    InvalidOp(String),
    #[error("nothing to undo")]
    NothingToUndo,
    #[error("replay failed at record {index}: {source}")]
    Replay { index: usize, source: Box<SessionError> },
    #[error("malformed record: {0}")]
    Malformed(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("image: {0}")]
    Image(String),
}

impl SessionError {
    /// Name of the error variant, delegating to the module that raised it.
    pub fn kind(&self) -> &'static str {
        match self {
            SessionError::Mesh(e) => e.kind(),
            SessionError::Constraint(e) => e.kind(),
            SessionError::Solver(e) => e.kind(),
            SessionError::Calib(e) => e.kind(),
            SessionError::Texture(e) => e.kind(),
            SessionError::NotFound(_) => "NotFound",
            SessionError::Degenerate(_) => "Degenerate",
            SessionError::StillReferenced(_) => "StillReferenced",
            SessionError::InvalidOp(_) => "InvalidOp",
            SessionError::NothingToUndo => "NothingToUndo",
            SessionError::Replay { .. } => "ReplayError",
            SessionError::Malformed(_) => "Malformed",
            SessionError::Io(_) => "Io",
            SessionError::Image(_) => "Image",
        }
    }

    /// Index of the failing record for replay errors.
    pub fn replay_index(&self) -> Option<usize> {
        match self {
            SessionError::Replay { index, .. } => Some(*index),
            _ => None,
        }
    }
}

impl From<serde_json::Error> for SessionError {
    fn from(e: serde_json::Error) -> Self {
        SessionError::Malformed(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, SessionError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorRecord {
    pub seq: u64,
    pub op: Op,
    pub inverse: Op,
}

/// Entity ids an operator (with its derived updates) touched.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChangeSet {
    pub added_vertices: Vec<VertexId>,
    pub removed_vertices: Vec<VertexId>,
    pub moved_vertices: Vec<VertexId>,
    pub added_edges: Vec<EdgeId>,
    pub removed_edges: Vec<EdgeId>,
    pub added_faces: Vec<FaceId>,
    pub removed_faces: Vec<FaceId>,
    pub changed_faces: Vec<FaceId>,
    pub added_constraints: Vec<ConstraintId>,
    pub removed_constraints: Vec<ConstraintId>,
    pub changed_constraints: Vec<ConstraintId>,
    pub changed_voxels: Vec<VoxelId>,
    pub changed_images: Vec<ImageId>,
    pub changed_cameras: Vec<ImageId>,
    pub calibrated: bool,
    pub solved: bool,
}

fn diff_keys<K: Ord + Copy, V: PartialEq>(a: &BTreeMap<K, V>, b: &BTreeMap<K, V>, added: &mut Vec<K>, removed: &mut Vec<K>, changed: &mut Vec<K>) {
    for (k, v) in b {
        match a.get(k) {
            None => added.push(*k),
            Some(old) if old != v => changed.push(*k),
            _ => {}
        }
    }
    removed.extend(a.keys().filter(|k| !b.contains_key(k)).copied());
}

/// Keys added, removed or changed, ascending.
fn touched<K: Ord + Copy, V: PartialEq>(a: &BTreeMap<K, V>, b: &BTreeMap<K, V>) -> Vec<K> {
    let (mut x, mut y, mut z) = (Vec::new(), Vec::new(), Vec::new());
    diff_keys(a, b, &mut x, &mut y, &mut z);
    let all: BTreeSet<K> = x.into_iter().chain(y).chain(z).collect();
    all.into_iter().collect()
}

/// Flattened view of the parts of a state a diff looks at.
struct Census {
    vertices: BTreeMap<VertexId, [u64; 3]>,
    edges: BTreeMap<EdgeId, (VertexId, VertexId)>,
    faces: BTreeMap<FaceId, Vec<VertexId>>,
    constraints: BTreeMap<ConstraintId, String>,
    voxels: BTreeMap<VoxelId, String>,
    images: BTreeMap<ImageId, ImageEntry>,
    cameras: BTreeMap<ImageId, Camera>,
}

impl Census {
    fn of(model: &Model, derived: &Derived) -> Self {
        let m = &model.mesh;
        let bits = |v: VertexId| {
            let p = m.position(v).expect("live");
            [p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]
        };
        Self {
            vertices: m.vertex_ids().map(|v| (v, bits(v))).collect(),
            edges: m.edge_ids().filter_map(|e| m.edge_endpoints(e).map(|x| (e, x))).collect(),
            faces: m.face_ids().map(|f| (f, m.face_vertices(f))).collect(),
            constraints: model
                .store
                .projections()
                .map(|c| (c.id, json(c)))
                .chain(model.store.spatials().map(|c| (c.id, json(c))))
                .collect(),
            voxels: model.store.bindings().map(|b| (b.voxel, json(b))).collect(),
            images: model.images.clone(),
            cameras: derived.cameras.clone(),
        }
    }
}

fn json<T: Serialize>(x: &T) -> String {
    serde_json::to_string(x).expect("serializable")
}

impl ChangeSet {
    fn between(before: &Census, after: &Census, flush: FlushOutcome) -> Self {
        let mut c = ChangeSet { calibrated: flush.calibrated, solved: flush.solved, ..Default::default() };
        diff_keys(&before.vertices, &after.vertices, &mut c.added_vertices, &mut c.removed_vertices, &mut c.moved_vertices);
        let mut unused = Vec::new();
        diff_keys(&before.edges, &after.edges, &mut c.added_edges, &mut c.removed_edges, &mut unused);
        diff_keys(&before.faces, &after.faces, &mut c.added_faces, &mut c.removed_faces, &mut c.changed_faces);
        diff_keys(&before.constraints, &after.constraints, &mut c.added_constraints, &mut c.removed_constraints, &mut c.changed_constraints);
        c.changed_voxels = touched(&before.voxels, &after.voxels);
        c.changed_images = touched(&before.images, &after.images);
        c.changed_cameras = touched(&before.cameras, &after.cameras);
        c
    }

    /// Union with a later change set.
    pub fn merge(&mut self, later: &ChangeSet) {
        fn join<T: Ord + Copy>(a: &mut Vec<T>, b: &[T]) {
            let s: BTreeSet<T> = a.iter().chain(b).copied().collect();
            *a = s.into_iter().collect();
        }
        join(&mut self.added_vertices, &later.added_vertices);
        join(&mut self.removed_vertices, &later.removed_vertices);
        join(&mut self.moved_vertices, &later.moved_vertices);
        join(&mut self.added_edges, &later.added_edges);
        join(&mut self.removed_edges, &later.removed_edges);
        join(&mut self.added_faces, &later.added_faces);
        join(&mut self.removed_faces, &later.removed_faces);
        join(&mut self.changed_faces, &later.changed_faces);
        join(&mut self.added_constraints, &later.added_constraints);
        join(&mut self.removed_constraints, &later.removed_constraints);
        join(&mut self.changed_constraints, &later.changed_constraints);
        join(&mut self.changed_voxels, &later.changed_voxels);
        join(&mut self.changed_images, &later.changed_images);
        join(&mut self.changed_cameras, &later.changed_cameras);
        self.calibrated |= later.calibrated;
        self.solved |= later.solved;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Applied {
    pub seq: u64,
    pub changes: ChangeSet,
}

/// Settings that shape outputs but not the model; kept out of the journal.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionConfig {
    pub atlas: AtlasOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub journal_len: usize,
    pub solve: Option<SolveReport>,
    pub solve_error: Option<String>,
    pub calibration: CalibrationReport,
    pub dof: DiagnosisReport,
    pub validity: crate::mesh::ValidityReport,
}

#[derive(Clone, Debug, Default)]
pub struct Session {
    model: Model,
    derived: Derived,
    journal: Vec<OperatorRecord>,
    /// State before each journal record, for exact undo.
    snapshots: Vec<(Model, Derived)>,
    pub config: SessionConfig,
    /// Project directory that relative image paths resolve against.
    root: Option<PathBuf>,
    /// Decoded pixels by relative path.
    pixels: BTreeMap<String, RgbaImage>,
}

impl PartialEq for Session {
    /// Same journal, model and derived state, compared bit for bit.
    fn eq(&self, other: &Self) -> bool {
        self.journal == other.journal && self.state_json() == other.state_json()
    }
}

impl Session {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_root(root: impl Into<PathBuf>) -> Self {
        Self { root: Some(root.into()), ..Self::default() }
    }

    pub fn root(&self) -> Option<&std::path::Path> {
        self.root.as_deref()
    }

    pub fn set_root(&mut self, root: impl Into<PathBuf>) {
        self.root = Some(root.into());
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn derived(&self) -> &Derived {
        &self.derived
    }

    pub fn mesh(&self) -> &crate::mesh::Mesh {
        &self.model.mesh
    }

    pub fn store(&self) -> &crate::constraint::ConstraintStore {
        &self.model.store
    }

    pub fn cameras(&self) -> &BTreeMap<ImageId, Camera> {
        &self.derived.cameras
    }

    pub fn journal(&self) -> &[OperatorRecord] {
        &self.journal
    }

    pub fn solve_report(&self) -> Option<&SolveReport> {
        self.derived.solve.as_ref()
    }

    /// Serialized model and derived state; equal strings mean bit-identical state.
    pub fn state_json(&self) -> String {
        serde_json::to_string(&(&self.model, &self.derived)).expect("serializable")
    }

    /// SHA-256 of [`Session::state_json`], for comparing states across processes.
    pub fn state_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.state_json().as_bytes()))
    }

    pub fn report(&self) -> SessionReport {
        SessionReport {
            journal_len: self.journal.len(),
            solve: self.derived.solve.clone(),
            solve_error: self.derived.solve_error.clone(),
            calibration: self.derived.calibration.clone(),
            dof: self.model.store.dof_report(&self.model.mesh),
            validity: self.model.mesh.validate(),
        }
    }

    /// Applies one operator atomically: on failure nothing changes.
    pub fn apply(&mut self, op: Op) -> Result<Applied> {
        let before = Census::of(&self.model, &self.derived);
        let mut model = self.model.clone();
        let inverse = model.apply(&op)?;
        let mut derived = self.derived.clone();
        let flush = derived.flush(&mut model, op.auto_solves());
        let after = Census::of(&model, &derived);
        let seq = self.journal.len() as u64;
        let old_model = std::mem::replace(&mut self.model, model);
        let old_derived = std::mem::replace(&mut self.derived, derived);
        self.snapshots.push((old_model, old_derived));
        self.journal.push(OperatorRecord { seq, op, inverse });
        Ok(Applied { seq, changes: ChangeSet::between(&before, &after, flush) })
    }

    /// Applies a sequence, stopping at the first failure (earlier ones stay).
    pub fn apply_all(&mut self, ops: impl IntoIterator<Item = Op>) -> Result<Vec<Applied>> {
        let mut out = Vec::new();
        for (i, op) in ops.into_iter().enumerate() {
            out.push(self.apply(op).map_err(|e| SessionError::Replay { index: i, source: Box::new(e) })?);
        }
        Ok(out)
    }

    /// Reverts the last record, restoring the exact prior state.
    pub fn undo(&mut self) -> Result<(OperatorRecord, ChangeSet)> {
        let record = self.journal.last().cloned().ok_or(SessionError::NothingToUndo)?;
        let before = Census::of(&self.model, &self.derived);
        let (model, derived) = match self.snapshots.pop() {
            Some(s) if self.snapshots.len() + 1 == self.journal.len() => s,
            _ => {
                // Snapshots are not persisted; rebuild the prefix.
                self.snapshots.clear();
                let prefix = Session::replay(&self.journal[..self.journal.len() - 1])?;
                (prefix.model, prefix.derived)
            }
        };
        self.model = model;
        self.derived = derived;
        self.journal.pop();
        let after = Census::of(&self.model, &self.derived);
        Ok((record, ChangeSet::between(&before, &after, FlushOutcome::default())))
    }

    /// Rebuilds a session from scratch by applying every record's operator.
    pub fn replay(records: &[OperatorRecord]) -> Result<Session> {
        let mut s = Session::new();
        for (i, r) in records.iter().enumerate() {
            if r.seq != i as u64 {
                return Err(SessionError::Replay { index: i, source: Box::new(SessionError::Malformed(format!("seq {} at position {i}", r.seq))) });
            }
            s.apply(r.op.clone()).map_err(|e| SessionError::Replay { index: i, source: Box::new(e) })?;
        }
        Ok(s)
    }

    /// Replays this session's journal and checks the result is bit-identical.
    pub fn verify_replay(&self) -> Result<bool> {
        let fresh = Session::replay(&self.journal)?;
        Ok(fresh.journal == self.journal && fresh.state_json() == self.state_json())
    }

    /// Decoded pixels of an image, loading from the project directory if needed.
    pub fn image_pixels(&mut self, id: ImageId) -> Result<&RgbaImage> {
        let entry = self.model.images.get(&id).ok_or_else(|| SessionError::NotFound(id.to_string()))?.clone();
        if !self.pixels.contains_key(&entry.path) {
            let root = self.root.as_ref().ok_or_else(|| SessionError::NotFound(format!("pixels of {id} (no project directory)")))?;
            let bytes = std::fs::read(root.join(&entry.path))?;
            let img = image::load_from_memory(&bytes).map_err(|e| SessionError::Image(e.to_string()))?.to_rgba8();
            self.pixels.insert(entry.path.clone(), img);
        }
        Ok(&self.pixels[&entry.path])
    }

    /// Registers image bytes. With a project directory the file is stored
    /// under `images/` by content hash; an identical image already present is
    /// returned without a new operator.
    pub fn add_image_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<(ImageId, Option<Applied>)> {
        use sha2::{Digest, Sha256};
        let sha = hex::encode(Sha256::digest(bytes));
        if let Some(e) = self.model.images.values().find(|e| e.sha256 == sha) {
            return Ok((e.id, None));
        }
        let img = image::load_from_memory(bytes).map_err(|e| SessionError::Image(format!("{name}: {e}")))?.to_rgba8();
        let ext = std::path::Path::new(name).extension().and_then(|x| x.to_str()).unwrap_or("png").to_ascii_lowercase();
        let path = format!("images/{sha}.{ext}");
        if let Some(root) = &self.root {
            std::fs::create_dir_all(root.join("images"))?;
            let target = root.join(&path);
            if !target.exists() {
                std::fs::write(&target, bytes)?;
            }
        }
        let (width, height) = img.dimensions();
        let id = self.model.next_image_id();
        let applied = self.apply(Op::AddImage { path: path.clone(), width, height, sha256: sha })?;
        self.pixels.insert(path, img);
        Ok((id, Some(applied)))
    }

    /// Supplies decoded pixels for an image whose file is elsewhere.
    pub fn attach_pixels(&mut self, id: ImageId, img: RgbaImage) -> Result<()> {
        let entry = self.model.images.get(&id).ok_or_else(|| SessionError::NotFound(id.to_string()))?;
        self.pixels.insert(entry.path.clone(), img);
        Ok(())
    }

    fn all_pixels(&mut self) -> Result<BTreeMap<ImageId, RgbaImage>> {
        let ids: Vec<ImageId> = self.model.images.keys().copied().collect();
        let mut out = BTreeMap::new();
        for id in ids {
            if self.derived.cameras.get(&id).is_some_and(Camera::is_full) {
                out.insert(id, self.image_pixels(id)?.clone());
            }
        }
        Ok(out)
    }

    /// Texture atlas of the current geometry, with the textured mesh copy.
    pub fn build_atlas(&mut self) -> Result<(crate::mesh::Mesh, crate::texture::Atlas)> {
        let images = self.all_pixels()?;
        let mut mesh = self.model.mesh.clone();
        let atlas = crate::texture::build_atlas(&mut mesh, &images, &self.derived.cameras, &self.config.atlas)?;
        Ok((mesh, atlas))
    }
}

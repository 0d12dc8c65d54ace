//! The constraint store: pixel correspondences, spatial relations between
//! vertices or faces, and parameterized-voxel bindings.
//!
//! Epipolar correspondences are not stored; they are read off the
//! projections of vertices seen in two images.

use crate::mesh::{FaceId, Mesh, PrimitiveSpec, PrimitiveTemplate, VertexId};
use crate::ImageId;
use nalgebra::{DMatrix, Point2, Point3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConstraintId(pub u32);

impl std::fmt::Display for ConstraintId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "c{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VoxelId(pub u32);

impl std::fmt::Display for VoxelId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "k{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("vertex {vertex} already has a projection in {image}")]
    Duplicate { vertex: VertexId, image: ImageId },
    #[error("pixel ({x}, {y}) lies outside the {width}x{height} image")]
    OutOfBounds { x: f64, y: f64, width: u32, height: u32 },
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid arity: {0}")]
    InvalidArity(String),
    #[error("invalid binding: {0}")]
    InvalidBinding(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

impl ConstraintError {
    pub fn kind(&self) -> &'static str {
        match self {
            ConstraintError::Duplicate { .. } => "Duplicate",
            ConstraintError::OutOfBounds { .. } => "OutOfBounds",
            ConstraintError::NotFound(_) => "NotFound",
            ConstraintError::InvalidArity(_) => "InvalidArity",
            ConstraintError::InvalidBinding(_) => "InvalidBinding",
            ConstraintError::InvalidParameter(_) => "InvalidParameter",
        }
    }
}

pub type Result<T> = std::result::Result<T, ConstraintError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn contains(&self, p: &Point2<f64>) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= self.width as f64 && p.y <= self.height as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionConstraint {
    pub id: ConstraintId,
    pub vertex: VertexId,
    pub image: ImageId,
    pub pixel: Point2<f64>,
    pub weight: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialKind {
    Coplanar,
    Collinear,
    FacesParallel,
    FacesPerpendicular,
}

impl SpatialKind {
    pub const ALL: [SpatialKind; 4] = [SpatialKind::Coplanar, SpatialKind::Collinear, SpatialKind::FacesParallel, SpatialKind::FacesPerpendicular];

    pub fn name(self) -> &'static str {
        match self {
            SpatialKind::Coplanar => "coplanar",
            SpatialKind::Collinear => "collinear",
            SpatialKind::FacesParallel => "faces_parallel",
            SpatialKind::FacesPerpendicular => "faces_perpendicular",
        }
    }

    pub fn on_faces(self) -> bool {
        matches!(self, SpatialKind::FacesParallel | SpatialKind::FacesPerpendicular)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialRefs {
    Vertices(Vec<VertexId>),
    Faces([FaceId; 2]),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialConstraint {
    pub id: ConstraintId,
    pub kind: SpatialKind,
    pub refs: SpatialRefs,
}

impl SpatialConstraint {
    /// Independent scalar equations the relation imposes.
    pub fn num_equations(&self) -> usize {
        match (&self.kind, &self.refs) {
            (SpatialKind::Coplanar, SpatialRefs::Vertices(v)) => v.len() - 3,
            (SpatialKind::Collinear, SpatialRefs::Vertices(v)) => 2 * (v.len() - 2),
            (SpatialKind::FacesParallel, _) => 2,
            (SpatialKind::FacesPerpendicular, _) => 1,
            _ => 0,
        }
    }

    pub fn vertices(&self, mesh: &Mesh) -> Vec<VertexId> {
        match &self.refs {
            SpatialRefs::Vertices(v) => v.clone(),
            SpatialRefs::Faces(f) => {
                let mut vs: Vec<VertexId> = f.iter().flat_map(|f| mesh.face_vertices(*f)).collect();
                vs.sort();
                vs.dedup();
                vs
            }
        }
    }
}

/// A predefined voxel whose canonical corners are driven by a pose and its
/// dimension parameters: `x = R · local(dims) + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelBinding {
    pub voxel: VoxelId,
    pub spec: PrimitiveSpec,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
    /// Mesh vertices in canonical corner order.
    pub members: Vec<VertexId>,
}

impl VoxelBinding {
    pub fn template(&self) -> PrimitiveTemplate {
        PrimitiveTemplate::of(self.spec.kind)
    }

    pub fn num_parameters(&self) -> usize {
        6 + self.spec.dims.len()
    }

    pub fn local_position(&self, index: usize) -> Point3<f64> {
        self.template().local_position(index, &self.spec.dims)
    }

    pub fn world_position(&self, index: usize) -> Point3<f64> {
        self.world_of_local(&self.local_position(index))
    }

    pub fn world_of_local(&self, local: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * local.coords + self.translation)
    }

    pub fn world_positions(&self) -> Vec<Point3<f64>> {
        let template = self.template();
        (0..self.members.len()).map(|i| self.world_of_local(&template.local_position(i, &self.spec.dims))).collect()
    }

    /// Writes the member positions into the mesh.
    pub fn apply(&self, mesh: &mut Mesh) {
        for (v, p) in self.members.iter().zip(self.world_positions()) {
            let _ = mesh.set_position(*v, p);
        }
    }

    pub fn member_index(&self, v: VertexId) -> Option<usize> {
        self.members.iter().position(|m| *m == v)
    }
}

/// Counts of unknowns and equations, with the vertices the UI should flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisReport {
    pub free_parameters: usize,
    pub equations: usize,
    pub under_constrained: Vec<VertexId>,
}

/// Counter positions, for rolling back id issuance on undo.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreWatermark {
    pub next_constraint: u32,
    pub next_voxel: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintStore {
    images: BTreeMap<ImageId, ImageSize>,
    projections: BTreeMap<ConstraintId, ProjectionConstraint>,
    spatials: BTreeMap<ConstraintId, SpatialConstraint>,
    bindings: BTreeMap<VoxelId, VoxelBinding>,
    next_constraint: u32,
    next_voxel: u32,
}

fn check_pixel(size: &ImageSize, p: &Point2<f64>) -> Result<()> {
    if size.contains(p) {
        Ok(())
    } else {
        Err(ConstraintError::OutOfBounds { x: p.x, y: p.y, width: size.width, height: size.height })
    }
}

fn check_weight(w: f64) -> Result<()> {
    if w.is_finite() && w >= 0.0 {
        Ok(())
    } else {
        Err(ConstraintError::InvalidParameter(format!("weight {w} must be finite and non-negative")))
    }
}

impl ConstraintStore {
    pub fn new() -> Self {
        Self::default()
    }

    // ---- images ----------------------------------------------------------

    pub fn register_image(&mut self, image: ImageId, size: ImageSize) {
        self.images.insert(image, size);
    }

    pub fn unregister_image(&mut self, image: ImageId) {
        self.images.remove(&image);
    }

    pub fn image_size(&self, image: ImageId) -> Option<ImageSize> {
        self.images.get(&image).copied()
    }

    pub fn images(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.images.keys().copied()
    }

    // ---- ids ---------------------------------------------------------------

    pub fn watermark(&self) -> StoreWatermark {
        StoreWatermark { next_constraint: self.next_constraint, next_voxel: self.next_voxel }
    }

    pub fn restore_watermark(&mut self, mark: StoreWatermark) {
        self.next_constraint = mark.next_constraint;
        self.next_voxel = mark.next_voxel;
    }

    fn issue(&mut self) -> ConstraintId {
        let id = ConstraintId(self.next_constraint);
        self.next_constraint += 1;
        id
    }

    // ---- projections -------------------------------------------------------

    pub fn add_projection(&mut self, mesh: &Mesh, vertex: VertexId, image: ImageId, pixel: Point2<f64>, weight: f64) -> Result<ConstraintId> {
        self.validate_projection(mesh, vertex, image, &pixel, weight)?;
        let id = self.issue();
        self.projections.insert(id, ProjectionConstraint { id, vertex, image, pixel, weight });
        Ok(id)
    }

    fn validate_projection(&self, mesh: &Mesh, vertex: VertexId, image: ImageId, pixel: &Point2<f64>, weight: f64) -> Result<()> {
        if !mesh.contains_vertex(vertex) {
            return Err(ConstraintError::NotFound(format!("vertex {vertex}")));
        }
        let size = self.image_size(image).ok_or_else(|| ConstraintError::NotFound(format!("image {image}")))?;
        if self.projection_for(vertex, image).is_some() {
            return Err(ConstraintError::Duplicate { vertex, image });
        }
        check_pixel(&size, pixel)?;
        check_weight(weight)
    }

    /// Re-inserts a removed constraint under its original id.
    pub fn restore_projection(&mut self, mesh: &Mesh, c: ProjectionConstraint) -> Result<()> {
        if self.projections.contains_key(&c.id) || self.spatials.contains_key(&c.id) {
            return Err(ConstraintError::InvalidParameter(format!("id {} in use", c.id)));
        }
        self.validate_projection(mesh, c.vertex, c.image, &c.pixel, c.weight)?;
        self.next_constraint = self.next_constraint.max(c.id.0 + 1);
        self.projections.insert(c.id, c);
        Ok(())
    }

    pub fn update_projection(&mut self, id: ConstraintId, pixel: Point2<f64>) -> Result<Point2<f64>> {
        let c = self.projections.get(&id).ok_or_else(|| ConstraintError::NotFound(format!("projection {id}")))?;
        let size = self.image_size(c.image).ok_or_else(|| ConstraintError::NotFound(format!("image {}", c.image)))?;
        check_pixel(&size, &pixel)?;
        let c = self.projections.get_mut(&id).expect("checked");
        Ok(std::mem::replace(&mut c.pixel, pixel))
    }

    pub fn remove_projection(&mut self, id: ConstraintId) -> Result<ProjectionConstraint> {
        self.projections.remove(&id).ok_or_else(|| ConstraintError::NotFound(format!("projection {id}")))
    }

    pub fn projection(&self, id: ConstraintId) -> Option<&ProjectionConstraint> {
        self.projections.get(&id)
    }

    pub fn projections(&self) -> impl Iterator<Item = &ProjectionConstraint> + '_ {
        self.projections.values()
    }

    pub fn num_projections(&self) -> usize {
        self.projections.len()
    }

    pub fn projection_for(&self, vertex: VertexId, image: ImageId) -> Option<&ProjectionConstraint> {
        self.projections.values().find(|c| c.vertex == vertex && c.image == image)
    }

    pub fn projections_of(&self, vertex: VertexId) -> Vec<&ProjectionConstraint> {
        self.projections.values().filter(|c| c.vertex == vertex).collect()
    }

    pub fn projections_in(&self, image: ImageId) -> Vec<&ProjectionConstraint> {
        self.projections.values().filter(|c| c.image == image).collect()
    }

    /// `vertex → pixel` for one image, ordered by vertex id.
    pub fn pixels_in(&self, image: ImageId) -> BTreeMap<VertexId, Point2<f64>> {
        self.projections.values().filter(|c| c.image == image).map(|c| (c.vertex, c.pixel)).collect()
    }

    // ---- epipolar pairs ---------------------------------------------------

    /// Vertices projected in both images, ascending.
    pub fn shared_vertices(&self, a: ImageId, b: ImageId) -> Vec<VertexId> {
        let pa = self.pixels_in(a);
        let pb = self.pixels_in(b);
        pa.keys().filter(|v| pb.contains_key(v)).copied().collect()
    }

    /// `(m, m′)` for every vertex projected in both images, ascending vertex id.
    pub fn derive_epipolar_pairs(&self, a: ImageId, b: ImageId) -> Vec<(Point2<f64>, Point2<f64>)> {
        let pa = self.pixels_in(a);
        let pb = self.pixels_in(b);
        pa.iter().filter_map(|(v, m)| pb.get(v).map(|mp| (*m, *mp))).collect()
    }

    // ---- spatial -------------------------------------------------------------

    pub fn add_spatial(&mut self, mesh: &Mesh, kind: SpatialKind, refs: SpatialRefs) -> Result<ConstraintId> {
        validate_spatial(mesh, kind, &refs)?;
        let id = self.issue();
        self.spatials.insert(id, SpatialConstraint { id, kind, refs });
        Ok(id)
    }

    pub fn restore_spatial(&mut self, mesh: &Mesh, c: SpatialConstraint) -> Result<()> {
        if self.projections.contains_key(&c.id) || self.spatials.contains_key(&c.id) {
            return Err(ConstraintError::InvalidParameter(format!("id {} in use", c.id)));
        }
        validate_spatial(mesh, c.kind, &c.refs)?;
        self.next_constraint = self.next_constraint.max(c.id.0 + 1);
        self.spatials.insert(c.id, c);
        Ok(())
    }

    pub fn remove_spatial(&mut self, id: ConstraintId) -> Result<SpatialConstraint> {
        self.spatials.remove(&id).ok_or_else(|| ConstraintError::NotFound(format!("spatial constraint {id}")))
    }

    pub fn spatial(&self, id: ConstraintId) -> Option<&SpatialConstraint> {
        self.spatials.get(&id)
    }

    pub fn spatials(&self) -> impl Iterator<Item = &SpatialConstraint> + '_ {
        self.spatials.values()
    }

    pub fn num_spatials(&self) -> usize {
        self.spatials.len()
    }

    // ---- bindings ----------------------------------------------------------

    /// Binds mesh vertices (canonical order of `spec.kind`) to a new voxel with
    /// identity pose and the dimensions of `spec`.
    pub fn bind_voxel(&mut self, mesh: &Mesh, spec: PrimitiveSpec, members: Vec<VertexId>) -> Result<VoxelId> {
        let voxel = VoxelId(self.next_voxel);
        self.insert_binding(
            mesh,
            VoxelBinding { voxel, spec, rotation: UnitQuaternion::identity(), translation: Vector3::zeros(), members },
        )?;
        Ok(voxel)
    }

    /// Inserts a fully specified binding (used when restoring state).
    pub fn insert_binding(&mut self, mesh: &Mesh, binding: VoxelBinding) -> Result<()> {
        binding.spec.validate().map_err(|e| ConstraintError::InvalidBinding(e.to_string()))?;
        let n = binding.spec.kind.num_vertices();
        if binding.members.len() != n {
            return Err(ConstraintError::InvalidBinding(format!("{:?} has {n} corners, got {} members", binding.spec.kind, binding.members.len())));
        }
        let distinct: BTreeSet<_> = binding.members.iter().collect();
        if distinct.len() != n {
            return Err(ConstraintError::InvalidBinding("repeated member vertex".into()));
        }
        if let Some(v) = binding.members.iter().find(|v| !mesh.contains_vertex(**v)) {
            return Err(ConstraintError::NotFound(format!("vertex {v}")));
        }
        if let Some(v) = binding.members.iter().find(|v| self.binding_of(**v).is_some()) {
            return Err(ConstraintError::InvalidBinding(format!("vertex {v} is already bound")));
        }
        if self.bindings.contains_key(&binding.voxel) {
            return Err(ConstraintError::InvalidBinding(format!("voxel {} exists", binding.voxel)));
        }
        if (binding.rotation.norm() - 1.0).abs() > 1e-9 {
            return Err(ConstraintError::InvalidBinding("rotation is not a unit quaternion".into()));
        }
        self.next_voxel = self.next_voxel.max(binding.voxel.0 + 1);
        self.bindings.insert(binding.voxel, binding);
        Ok(())
    }

    pub fn unbind(&mut self, voxel: VoxelId) -> Result<VoxelBinding> {
        self.bindings.remove(&voxel).ok_or_else(|| ConstraintError::NotFound(format!("voxel {voxel}")))
    }

    pub fn binding(&self, voxel: VoxelId) -> Option<&VoxelBinding> {
        self.bindings.get(&voxel)
    }

    pub fn binding_mut(&mut self, voxel: VoxelId) -> Option<&mut VoxelBinding> {
        self.bindings.get_mut(&voxel)
    }

    pub fn bindings(&self) -> impl Iterator<Item = &VoxelBinding> + '_ {
        self.bindings.values()
    }

    pub fn bindings_mut(&mut self) -> impl Iterator<Item = &mut VoxelBinding> + '_ {
        self.bindings.values_mut()
    }

    pub fn binding_of(&self, v: VertexId) -> Option<&VoxelBinding> {
        self.bindings.values().find(|b| b.members.contains(&v))
    }

    // ---- integrity -----------------------------------------------------------

    /// Whether any constraint or binding mentions the vertex.
    pub fn references_vertex(&self, mesh: &Mesh, v: VertexId) -> bool {
        self.projections.values().any(|c| c.vertex == v)
            || self.binding_of(v).is_some()
            || self.spatials.values().any(|s| matches!(&s.refs, SpatialRefs::Vertices(vs) if vs.contains(&v)))
            || self.spatials.values().any(|s| s.kind.on_faces() && s.vertices(mesh).contains(&v))
    }

    pub fn references_face(&self, f: FaceId) -> bool {
        self.spatials.values().any(|s| matches!(&s.refs, SpatialRefs::Faces(fs) if fs.contains(&f)))
    }

    /// Ids of everything referring to entities missing from `mesh`.
    pub fn dangling(&self, mesh: &Mesh) -> Vec<String> {
        let mut out = Vec::new();
        for c in self.projections.values() {
            if !mesh.contains_vertex(c.vertex) {
                out.push(c.id.to_string());
            }
        }
        for s in self.spatials.values() {
            let ok = match &s.refs {
                SpatialRefs::Vertices(vs) => vs.iter().all(|v| mesh.contains_vertex(*v)),
                SpatialRefs::Faces(fs) => fs.iter().all(|f| mesh.contains_face(*f)),
            };
            if !ok {
                out.push(s.id.to_string());
            }
        }
        for b in self.bindings.values() {
            if !b.members.iter().all(|v| mesh.contains_vertex(*v)) {
                out.push(b.voxel.to_string());
            }
        }
        out
    }

    /// Same constraints and bindings, ignoring id counters.
    pub fn same_contents(&self, other: &ConstraintStore) -> bool {
        self.images == other.images && self.projections == other.projections && self.spatials == other.spatials && self.bindings == other.bindings
    }

    // ---- diagnosis -----------------------------------------------------------

    /// Free parameters against independent equations. Unbound vertices need
    /// projections in two images; a binding needs at least as many projection
    /// equations on its members as it has parameters.
    pub fn dof_report(&self, mesh: &Mesh) -> DiagnosisReport {
        let mut free_parameters = 0;
        let mut flagged = BTreeSet::new();
        let images_of = |v: VertexId| self.projections.values().filter(|c| c.vertex == v).count();
        for b in self.bindings.values() {
            free_parameters += b.num_parameters();
            let eq: usize = b.members.iter().map(|v| 2 * images_of(*v)).sum();
            if eq < b.num_parameters() {
                flagged.extend(b.members.iter().copied());
            }
        }
        for v in mesh.vertex_ids() {
            if self.binding_of(v).is_some() {
                continue;
            }
            free_parameters += 3;
            if images_of(v) < 2 {
                flagged.insert(v);
            }
        }
        let equations = 2 * self.projections.len() + self.spatials.values().map(|s| s.num_equations()).sum::<usize>();
        DiagnosisReport { free_parameters, equations, under_constrained: flagged.into_iter().collect() }
    }
}

fn validate_spatial(mesh: &Mesh, kind: SpatialKind, refs: &SpatialRefs) -> Result<()> {
    match (kind, refs) {
        (SpatialKind::Coplanar | SpatialKind::Collinear, SpatialRefs::Vertices(vs)) => {
            let min = if kind == SpatialKind::Coplanar { 4 } else { 3 };
            if vs.len() < min {
                return Err(ConstraintError::InvalidArity(format!("{} needs at least {min} vertices, got {}", kind.name(), vs.len())));
            }
            let distinct: BTreeSet<_> = vs.iter().collect();
            if distinct.len() != vs.len() {
                return Err(ConstraintError::InvalidArity("repeated vertex".into()));
            }
            if let Some(v) = vs.iter().find(|v| !mesh.contains_vertex(**v)) {
                return Err(ConstraintError::NotFound(format!("vertex {v}")));
            }
            Ok(())
        }
        (SpatialKind::FacesParallel | SpatialKind::FacesPerpendicular, SpatialRefs::Faces([a, b])) => {
            if a == b {
                return Err(ConstraintError::InvalidArity("the two faces must differ".into()));
            }
            if let Some(f) = [a, b].into_iter().find(|f| !mesh.contains_face(**f)) {
                return Err(ConstraintError::NotFound(format!("face {f}")));
            }
            Ok(())
        }
        (k, _) => Err(ConstraintError::InvalidArity(format!("{} takes {}", k.name(), if k.on_faces() { "two faces" } else { "vertices" }))),
    }
}

fn centered_singular_values(points: &[Point3<f64>]) -> Vec<f64> {
    let n = points.len();
    let c = points.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    let m = DMatrix::from_fn(n.max(3), 3, |i, j| if i < n { points[i][j] - c[j] } else { 0.0 });
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Smallest singular value of the centered `n × 3` point matrix.
pub fn coplanar_residual(points: &[Point3<f64>]) -> f64 {
    centered_singular_values(points)[2]
}

/// Second-smallest singular value of the centered `n × 3` point matrix.
pub fn collinear_residual(points: &[Point3<f64>]) -> f64 {
    centered_singular_values(points)[1]
}

pub fn parallel_residual(na: &Vector3<f64>, nb: &Vector3<f64>) -> f64 {
    na.normalize().cross(&nb.normalize()).norm()
}

pub fn perpendicular_residual(na: &Vector3<f64>, nb: &Vector3<f64>) -> f64 {
    na.normalize().dot(&nb.normalize())
}

/// Residual of a spatial constraint at the mesh's current positions; `None`
/// when a reference is missing or a face is degenerate.
pub fn spatial_residual(mesh: &Mesh, c: &SpatialConstraint) -> Option<f64> {
    match &c.refs {
        SpatialRefs::Vertices(vs) => {
            let pts: Option<Vec<Point3<f64>>> = vs.iter().map(|v| mesh.position(*v)).collect();
            let pts = pts?;
            Some(match c.kind {
                SpatialKind::Coplanar => coplanar_residual(&pts),
                _ => collinear_residual(&pts),
            })
        }
        SpatialRefs::Faces([a, b]) => {
            let na = mesh.face_normal(*a)?;
            let nb = mesh.face_normal(*b)?;
            Some(match c.kind {
                SpatialKind::FacesParallel => parallel_residual(&na, &nb),
                _ => perpendicular_residual(&na, &nb),
            })
        }
    }
}

//! The journaled part of a session: topology, vertex positions, constraint
//! store, images, line annotations and user settings. Every operator maps
//! this state to a new one and returns its inverse.

use super::{Result, SessionError};
use crate::calib::Axis;
use crate::constraint::{ConstraintId, ConstraintStore, ImageSize, ProjectionConstraint, SpatialConstraint, SpatialKind, SpatialRefs, VoxelId};
use crate::mesh::{EdgeId, FaceId, Mesh, PrimitiveSpec, VertexId, Watermark};
use crate::solver::SolveOptions;
use crate::ImageId;
use nalgebra::{Isometry3, Point2, Point3, Quaternion, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Face cycle rotated to start at its smallest vertex.
fn cycle_key(mut vs: Vec<VertexId>) -> Vec<VertexId> {
    if let Some(i) = vs.iter().enumerate().min_by_key(|(_, v)| **v).map(|(i, _)| i) {
        vs.rotate_left(i);
    }
    vs
}

/// Whether the faces around the binding's members are exactly those of its
/// primitive, so that recreating the primitive restores the topology.
fn has_canonical_faces(mesh: &Mesh, b: &crate::constraint::VoxelBinding) -> bool {
    let Ok(canon) = crate::mesh::k_create(&b.spec) else { return false };
    let Some(want) = canon
        .face_ids()
        .map(|f| canon.face_vertices(f).into_iter().map(|v| b.members.get(v.0 as usize).copied()).collect::<Option<Vec<_>>>().map(cycle_key))
        .collect::<Option<BTreeSet<_>>>()
    else {
        return false;
    };
    let have: BTreeSet<Vec<VertexId>> = mesh
        .face_ids()
        .map(|f| mesh.face_vertices(f))
        .filter(|vs| vs.iter().any(|v| b.members.contains(v)))
        .map(cycle_key)
        .collect();
    b.members.iter().all(|m| mesh.contains_vertex(*m)) && have == want
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: ImageId,
    /// Path relative to the project directory.
    pub path: String,
    pub width: u32,
    pub height: u32,
    /// Hex SHA-256 of the file contents.
    pub sha256: String,
}

/// One user-drawn segment along a world axis, as in the annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineAnnotation {
    pub image: ImageId,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub axis: Axis,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLength {
    pub a: VertexId,
    pub b: VertexId,
    pub length: f64,
}

/// Placement of a new voxel: translation and rotation vector (axis × angle).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    #[serde(default)]
    pub translation: [f64; 3],
    #[serde(default)]
    pub rotation: [f64; 3],
    /// Exact rotation as a unit quaternion `[i, j, k, w]`. Overrides `rotation`
    /// when present, so recreating a destroyed voxel is bit-exact.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quaternion: Option<[f64; 4]>,
}

impl Pose {
    pub fn isometry(&self) -> Isometry3<f64> {
        let t = self.translation;
        let rotation = match self.quaternion {
            Some([i, j, k, w]) => {
                let q = Quaternion::new(w, i, j, k);
                if (q.norm() - 1.0).abs() < 1e-12 { UnitQuaternion::new_unchecked(q) } else { UnitQuaternion::new_normalize(q) }
            }
            None => UnitQuaternion::from_scaled_axis(Vector3::from(self.rotation)),
        };
        Isometry3::from_parts(Translation3::new(t[0], t[1], t[2]), rotation)
    }
}

fn default_weight() -> f64 {
    1.0
}

/// Every operator a session accepts. Topology (K), constraint (F) and
/// vertex (V) operators, plus the settings that feed derived state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    AddImage {
        path: String,
        width: u32,
        height: u32,
        #[serde(default)]
        sha256: String,
    },
    RemoveImage {
        image: ImageId,
    },
    KCreate {
        spec: PrimitiveSpec,
        #[serde(default)]
        pose: Pose,
    },
    /// Removes an untouched voxel created by `k_create`; the inverse of it.
    KDestroy {
        vertex: VertexId,
    },
    ESplit {
        edge: EdgeId,
        t: f64,
        /// Exact position for the new vertex instead of the interpolated one.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        at: Option<Point3<f64>>,
    },
    VDelete {
        vertex: VertexId,
    },
    VConnect {
        a: VertexId,
        b: VertexId,
        /// Face to split when the vertices share more than one.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        face: Option<FaceId>,
    },
    EDelete {
        edge: EdgeId,
    },
    AddProjection {
        vertex: VertexId,
        image: ImageId,
        pixel: Point2<f64>,
        #[serde(default = "default_weight")]
        weight: f64,
    },
    UpdateProjection {
        id: ConstraintId,
        pixel: Point2<f64>,
    },
    RemoveProjection {
        id: ConstraintId,
    },
    RestoreProjection {
        constraint: ProjectionConstraint,
    },
    AddSpatial {
        kind: SpatialKind,
        refs: SpatialRefs,
    },
    RemoveSpatial {
        id: ConstraintId,
    },
    RestoreSpatial {
        constraint: SpatialConstraint,
    },
    AddLines {
        lines: Vec<LineAnnotation>,
    },
    /// Keeps the first `len` line annotations; the inverse of `add_lines`.
    TruncateLines {
        len: usize,
    },
    NudgeVertex {
        vertex: VertexId,
        position: Point3<f64>,
    },
    SetVoxelPose {
        voxel: VoxelId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rotation: Option<UnitQuaternion<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        translation: Option<Vector3<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dims: Option<Vec<f64>>,
    },
    SetReferenceLength {
        a: VertexId,
        b: VertexId,
        length: f64,
    },
    ClearReferenceLength,
    SetSolveOptions {
        options: SolveOptions,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::AddImage { .. } => "add_image",
            Op::RemoveImage { .. } => "remove_image",
            Op::KCreate { .. } => "k_create",
            Op::KDestroy { .. } => "k_destroy",
            Op::ESplit { .. } => "e_split",
            Op::VDelete { .. } => "v_delete",
            Op::VConnect { .. } => "v_connect",
            Op::EDelete { .. } => "e_delete",
            Op::AddProjection { .. } => "add_projection",
            Op::UpdateProjection { .. } => "update_projection",
            Op::RemoveProjection { .. } => "remove_projection",
            Op::RestoreProjection { .. } => "restore_projection",
            Op::AddSpatial { .. } => "add_spatial",
            Op::RemoveSpatial { .. } => "remove_spatial",
            Op::RestoreSpatial { .. } => "restore_spatial",
            Op::AddLines { .. } => "add_lines",
            Op::TruncateLines { .. } => "truncate_lines",
            Op::NudgeVertex { .. } => "nudge_vertex",
            Op::SetVoxelPose { .. } => "set_voxel_pose",
            Op::SetReferenceLength { .. } => "set_reference_length",
            Op::ClearReferenceLength => "clear_reference_length",
            Op::SetSolveOptions { .. } => "set_solve_options",
        }
    }

    /// Operators after which geometry is re-solved.
    pub fn auto_solves(&self) -> bool {
        matches!(
            self,
            Op::AddProjection { .. }
                | Op::UpdateProjection { .. }
                | Op::RemoveProjection { .. }
                | Op::RestoreProjection { .. }
                | Op::AddSpatial { .. }
                | Op::RemoveSpatial { .. }
                | Op::RestoreSpatial { .. }
                | Op::NudgeVertex { .. }
                | Op::SetVoxelPose { .. }
                | Op::SetSolveOptions { .. }
        )
    }
}

/// Id counters of every table, for rolling back issuance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMarks {
    pub mesh: Watermark,
    pub store: crate::constraint::StoreWatermark,
    pub images: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub images: BTreeMap<ImageId, ImageEntry>,
    next_image: u32,
    pub mesh: Mesh,
    pub store: ConstraintStore,
    pub lines: Vec<LineAnnotation>,
    pub reference: Option<ReferenceLength>,
    pub solve_options: SolveOptions,
}

fn finite3(p: &Point3<f64>) -> bool {
    p.iter().all(|x| x.is_finite())
}

impl Model {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn marks(&self) -> ModelMarks {
        ModelMarks { mesh: self.mesh.watermark(), store: self.store.watermark(), images: self.next_image }
    }

    pub fn restore_marks(&mut self, marks: ModelMarks) -> Result<()> {
        self.mesh.restore_watermark(marks.mesh)?;
        self.store.restore_watermark(marks.store);
        if self.images.keys().any(|id| id.0 >= marks.images) {
            return Err(SessionError::InvalidOp("cannot roll back an image id still in use".into()));
        }
        self.next_image = marks.images;
        Ok(())
    }

    pub fn next_image_id(&self) -> ImageId {
        ImageId(self.next_image)
    }

    /// Whether a projection or spatial constraint mentions `v`.
    fn constrains_vertex(&self, v: VertexId) -> bool {
        !self.store.projections_of(v).is_empty() || self.store.spatials().any(|c| c.vertices(&self.mesh).contains(&v))
    }

    fn check_vertex_free(&self, v: VertexId, what: &str) -> Result<()> {
        if self.store.references_vertex(&self.mesh, v) {
            return Err(SessionError::StillReferenced(format!("{v} is referenced by a constraint; {what}")));
        }
        if self.store.binding_of(v).is_some() {
            return Err(SessionError::StillReferenced(format!("{v} is bound to a voxel; {what}")));
        }
        Ok(())
    }

    /// Applies `op` and returns its inverse. On error the model may be
    /// partially modified; callers restore from a copy.
    pub fn apply(&mut self, op: &Op) -> Result<Op> {
        match op {
            Op::AddImage { path, width, height, sha256 } => {
                if *width == 0 || *height == 0 {
                    return Err(SessionError::InvalidOp(format!("image {path} has zero size")));
                }
                let id = ImageId(self.next_image);
                self.next_image += 1;
                self.images.insert(id, ImageEntry { id, path: path.clone(), width: *width, height: *height, sha256: sha256.clone() });
                self.store.register_image(id, ImageSize { width: *width, height: *height });
                Ok(Op::RemoveImage { image: id })
            }
            Op::RemoveImage { image } => {
                let entry = self.images.get(image).ok_or_else(|| SessionError::NotFound(image.to_string()))?.clone();
                if !self.store.projections_in(*image).is_empty() || self.lines.iter().any(|l| l.image == *image) {
                    return Err(SessionError::StillReferenced(format!("{image} has projections or lines")));
                }
                self.images.remove(image);
                self.store.unregister_image(*image);
                Ok(Op::AddImage { path: entry.path, width: entry.width, height: entry.height, sha256: entry.sha256 })
            }
            Op::KCreate { spec, pose } => {
                let iso = pose.isometry();
                let ids = self.mesh.add_primitive(spec, &iso)?;
                let k = self.store.bind_voxel(&self.mesh, spec.clone(), ids.vertices.clone())?;
                let b = self.store.binding_mut(k).expect("just bound");
                b.rotation = iso.rotation;
                b.translation = iso.translation.vector;
                b.apply(&mut self.mesh);
                Ok(Op::KDestroy { vertex: ids.vertices[0] })
            }
            Op::KDestroy { vertex } => {
                let comp = self.mesh.component_of(*vertex);
                if comp.is_empty() {
                    return Err(SessionError::NotFound(vertex.to_string()));
                }
                for v in &comp {
                    if self.constrains_vertex(*v) {
                        return Err(SessionError::StillReferenced(format!("{v} is referenced by a constraint")));
                    }
                }
                let binding = self.store.binding_of(*vertex).cloned();
                let inverse = match &binding {
                    Some(b) if b.members.len() == comp.len() && b.members[0] == *vertex && has_canonical_faces(&self.mesh, b) => {
                        let rot = b.rotation.scaled_axis();
                        let q = b.rotation.coords;
                        let t = b.translation;
                        let pose = Pose { translation: [t.x, t.y, t.z], rotation: [rot.x, rot.y, rot.z], quaternion: Some([q.x, q.y, q.z, q.w]) };
                        Op::KCreate { spec: b.spec.clone(), pose }
                    }
                    _ => return Err(SessionError::InvalidOp(format!("component of {vertex} is not an unedited voxel"))),
                };
                if let Some(b) = binding {
                    self.store.unbind(b.voxel)?;
                }
                self.mesh.remove_component(*vertex)?;
                Ok(inverse)
            }
            Op::ESplit { edge, t, at } => {
                if let Some(p) = at {
                    if !finite3(p) {
                        return Err(SessionError::InvalidOp("split position must be finite".into()));
                    }
                }
                let (v, _) = self.mesh.e_split(*edge, *t)?;
                if let Some(p) = at {
                    self.mesh.set_position(v, *p)?;
                }
                Ok(Op::VDelete { vertex: v })
            }
            Op::VDelete { vertex } => {
                let position = self.mesh.position(*vertex).ok_or_else(|| SessionError::NotFound(vertex.to_string()))?;
                self.check_vertex_free(*vertex, "remove the constraint first")?;
                let edge = self.mesh.v_delete(*vertex)?;
                let (p, q) = self.mesh.edge_endpoints(edge).expect("merged edge");
                let (pp, qp) = (self.mesh.position(p).expect("live"), self.mesh.position(q).expect("live"));
                let len = (qp - pp).norm();
                let t = if len > 0.0 { ((position - pp).norm() / len).clamp(1e-9, 1.0 - 1e-9) } else { 0.5 };
                Ok(Op::ESplit { edge, t, at: Some(position) })
            }
            Op::VConnect { a, b, face } => {
                let (e, _) = self.mesh.v_connect_in(*a, *b, *face)?;
                Ok(Op::EDelete { edge: e })
            }
            Op::EDelete { edge } => {
                let (a, b) = self.mesh.edge_endpoints(*edge).ok_or_else(|| SessionError::NotFound(edge.to_string()))?;
                for side in [edge.half(0), edge.half(1)] {
                    if let Some(f) = self.mesh.half_edge(side).and_then(|x| x.face) {
                        if self.store.references_face(f) {
                            return Err(SessionError::StillReferenced(format!("{f} is referenced by a constraint")));
                        }
                    }
                }
                let merged = self.mesh.e_delete(*edge)?;
                Ok(Op::VConnect { a, b, face: Some(merged) })
            }
            Op::AddProjection { vertex, image, pixel, weight } => {
                let id = self.store.add_projection(&self.mesh, *vertex, *image, *pixel, *weight)?;
                Ok(Op::RemoveProjection { id })
            }
            Op::UpdateProjection { id, pixel } => {
                let old = self.store.update_projection(*id, *pixel)?;
                Ok(Op::UpdateProjection { id: *id, pixel: old })
            }
            Op::RemoveProjection { id } => {
                let c = self.store.remove_projection(*id)?;
                Ok(Op::RestoreProjection { constraint: c })
            }
            Op::RestoreProjection { constraint } => {
                self.store.restore_projection(&self.mesh, constraint.clone())?;
                Ok(Op::RemoveProjection { id: constraint.id })
            }
            Op::AddSpatial { kind, refs } => {
                let id = self.store.add_spatial(&self.mesh, *kind, refs.clone())?;
                Ok(Op::RemoveSpatial { id })
            }
            Op::RemoveSpatial { id } => {
                let c = self.store.remove_spatial(*id)?;
                Ok(Op::RestoreSpatial { constraint: c })
            }
            Op::RestoreSpatial { constraint } => {
                self.store.restore_spatial(&self.mesh, constraint.clone())?;
                Ok(Op::RemoveSpatial { id: constraint.id })
            }
            Op::AddLines { lines } => {
                for l in lines {
                    if !self.images.contains_key(&l.image) {
                        return Err(SessionError::NotFound(l.image.to_string()));
                    }
                    if ![l.x1, l.y1, l.x2, l.y2].iter().all(|x| x.is_finite()) || (l.x1 == l.x2 && l.y1 == l.y2) {
                        return Err(SessionError::InvalidOp("line segment endpoints must be finite and distinct".into()));
                    }
                }
                let len = self.lines.len();
                self.lines.extend(lines.iter().cloned());
                Ok(Op::TruncateLines { len })
            }
            Op::TruncateLines { len } => {
                if *len > self.lines.len() {
                    return Err(SessionError::InvalidOp(format!("only {} line annotations", self.lines.len())));
                }
                let removed = self.lines.split_off(*len);
                Ok(Op::AddLines { lines: removed })
            }
            Op::NudgeVertex { vertex, position } => {
                let old = crate::solver::nudge_vertex(&mut self.mesh, &self.store, *vertex, *position)?;
                Ok(Op::NudgeVertex { vertex: *vertex, position: old })
            }
            Op::SetVoxelPose { voxel, rotation, translation, dims } => {
                let b = self.store.binding(*voxel).ok_or_else(|| SessionError::NotFound(voxel.to_string()))?.clone();
                if let Some(d) = dims {
                    crate::mesh::PrimitiveSpec::new(b.spec.kind, d.clone()).validate()?;
                }
                if translation.is_some_and(|t| !t.iter().all(|x| x.is_finite())) {
                    return Err(SessionError::InvalidOp("translation must be finite".into()));
                }
                let inverse = Op::SetVoxelPose {
                    voxel: *voxel,
                    rotation: rotation.map(|_| b.rotation),
                    translation: translation.map(|_| b.translation),
                    dims: dims.as_ref().map(|_| b.spec.dims.clone()),
                };
                let slot = self.store.binding_mut(*voxel).expect("checked");
                if let Some(r) = rotation {
                    slot.rotation = *r;
                }
                if let Some(t) = translation {
                    slot.translation = *t;
                }
                if let Some(d) = dims {
                    slot.spec.dims = d.clone();
                }
                slot.apply(&mut self.mesh);
                Ok(inverse)
            }
            Op::SetReferenceLength { a, b, length } => {
                let pa = self.mesh.position(*a).ok_or_else(|| SessionError::NotFound(a.to_string()))?;
                let pb = self.mesh.position(*b).ok_or_else(|| SessionError::NotFound(b.to_string()))?;
                if !(*length > 0.0) || !length.is_finite() {
                    return Err(SessionError::Degenerate(format!("reference length {length} must be positive")));
                }
                if a == b || (pa - pb).norm() == 0.0 {
                    return Err(SessionError::Degenerate("reference vertices coincide".into()));
                }
                let old = self.reference.replace(ReferenceLength { a: *a, b: *b, length: *length });
                Ok(match old {
                    Some(r) => Op::SetReferenceLength { a: r.a, b: r.b, length: r.length },
                    None => Op::ClearReferenceLength,
                })
            }
            Op::ClearReferenceLength => {
                let old = self.reference.take();
                Ok(match old {
                    Some(r) => Op::SetReferenceLength { a: r.a, b: r.b, length: r.length },
                    None => Op::ClearReferenceLength,
                })
            }
            Op::SetSolveOptions { options } => {
                options.validate()?;
                let old = std::mem::replace(&mut self.solve_options, options.clone());
                Ok(Op::SetSolveOptions { options: old })
            }
        }
    }
}

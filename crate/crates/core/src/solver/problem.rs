//! Residuals and Jacobians of the penalized reprojection objective.

use crate::calib::Camera;
use crate::constraint::{ConstraintId, ConstraintStore, SpatialConstraint, SpatialKind, SpatialRefs, VoxelBinding, VoxelId};
use crate::linalg::skew;
use crate::mesh::{newell_normal, Mesh, VertexId};
use crate::ImageId;
use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Point2, Point3, SymmetricEigen, UnitQuaternion, Vector3};
use std::collections::{BTreeMap, BTreeSet};

/// Values of every geometric variable: free vertex positions and voxel bindings.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometryState {
    pub positions: BTreeMap<VertexId, Point3<f64>>,
    pub bindings: BTreeMap<VoxelId, VoxelBinding>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub(crate) enum Entity {
    Vertex(VertexId),
    Voxel(VoxelId),
}

#[derive(Clone, Debug)]
pub(crate) struct Observation {
    pub constraint: ConstraintId,
    pub vertex: VertexId,
    pub image: ImageId,
    pub pixel: Point2<f64>,
    pub sqrt_weight: f64,
}

/// The penalized least-squares problem over the active variables.
///
/// Parameters are laid out entity by entity: three coordinates per free
/// vertex, then per voxel a rotation increment (3, applied on the left), a
/// translation (3) and the dimensions.
#[derive(Clone, Debug)]
pub struct GeometryProblem {
    pub(crate) cameras: BTreeMap<ImageId, Camera>,
    pub(crate) observations: Vec<Observation>,
    pub(crate) excluded: Vec<ConstraintId>,
    pub(crate) spatials: Vec<SpatialConstraint>,
    pub(crate) faces: BTreeMap<crate::mesh::FaceId, Vec<VertexId>>,
    pub(crate) member_of: BTreeMap<VertexId, (VoxelId, usize)>,
    pub(crate) offsets: BTreeMap<Entity, usize>,
    pub(crate) num_params: usize,
    initial: GeometryState,
}

fn entity_size(e: Entity, state: &GeometryState) -> usize {
    match e {
        Entity::Vertex(_) => 3,
        Entity::Voxel(k) => state.bindings[&k].num_parameters(),
    }
}

impl GeometryProblem {
    /// Every free vertex and binding is active.
    pub fn new(cameras: &BTreeMap<ImageId, Camera>, mesh: &Mesh, store: &ConstraintStore) -> Self {
        Self::with_frozen(cameras, mesh, store, &BTreeSet::new())
    }

    pub(crate) fn with_frozen(cameras: &BTreeMap<ImageId, Camera>, mesh: &Mesh, store: &ConstraintStore, frozen: &BTreeSet<Entity>) -> Self {
        let cameras: BTreeMap<ImageId, Camera> = cameras.iter().filter(|(_, c)| c.is_full()).map(|(k, c)| (*k, c.clone())).collect();
        let mut member_of = BTreeMap::new();
        let mut bindings = BTreeMap::new();
        for b in store.bindings() {
            for (i, v) in b.members.iter().enumerate() {
                member_of.insert(*v, (b.voxel, i));
            }
            bindings.insert(b.voxel, b.clone());
        }
        let positions: BTreeMap<VertexId, Point3<f64>> =
            mesh.vertex_ids().filter(|v| !member_of.contains_key(v)).map(|v| (v, mesh.position(v).expect("live"))).collect();
        let initial = GeometryState { positions, bindings };

        let mut observations = Vec::new();
        let mut excluded = Vec::new();
        for c in store.projections() {
            if cameras.contains_key(&c.image) && mesh.contains_vertex(c.vertex) {
                observations.push(Observation { constraint: c.id, vertex: c.vertex, image: c.image, pixel: c.pixel, sqrt_weight: c.weight.sqrt() });
            } else {
                excluded.push(c.id);
            }
        }
        let spatials: Vec<SpatialConstraint> = store.spatials().cloned().collect();
        let mut faces = BTreeMap::new();
        for s in &spatials {
            if let SpatialRefs::Faces(fs) = &s.refs {
                for f in fs {
                    faces.insert(*f, mesh.face_vertices(*f));
                }
            }
        }

        let mut offsets = BTreeMap::new();
        let mut n = 0;
        let entities = initial.positions.keys().map(|v| Entity::Vertex(*v)).chain(initial.bindings.keys().map(|k| Entity::Voxel(*k)));
        for e in entities {
            if frozen.contains(&e) {
                continue;
            }
            offsets.insert(e, n);
            n += entity_size(e, &initial);
        }
        Self { cameras, observations, excluded, spatials, faces, member_of, offsets, num_params: n, initial }
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn initial_state(&self) -> GeometryState {
        self.initial.clone()
    }

    pub fn num_projection_residuals(&self) -> usize {
        self.observations.len()
    }

    pub(crate) fn entities(&self) -> impl Iterator<Item = (Entity, usize)> + '_ {
        self.offsets.iter().map(|(e, o)| (*e, *o))
    }

    pub fn position(&self, state: &GeometryState, v: VertexId) -> Point3<f64> {
        match self.member_of.get(&v) {
            Some((k, i)) => state.bindings[k].world_position(*i),
            None => state.positions[&v],
        }
    }

    /// Per-parameter magnitude used for finite-difference steps.
    pub fn variable_scales(&self, state: &GeometryState) -> DVector<f64> {
        let mut s = DVector::from_element(self.num_params, 1.0);
        for (e, off) in self.entities() {
            match e {
                Entity::Vertex(v) => {
                    let p = state.positions[&v];
                    for k in 0..3 {
                        s[off + k] = p[k].abs().max(1.0);
                    }
                }
                Entity::Voxel(k) => {
                    let b = &state.bindings[&k];
                    for j in 0..3 {
                        s[off + 3 + j] = b.translation[j].abs().max(1.0);
                    }
                    for (j, d) in b.spec.dims.iter().enumerate() {
                        s[off + 6 + j] = d.abs().max(1e-3);
                    }
                }
            }
        }
        s
    }

    /// Applies a parameter increment.
    pub fn retract(&self, state: &GeometryState, delta: &DVector<f64>) -> GeometryState {
        let mut out = state.clone();
        for (e, off) in self.entities() {
            match e {
                Entity::Vertex(v) => {
                    let p = out.positions.get_mut(&v).expect("active");
                    *p += Vector3::new(delta[off], delta[off + 1], delta[off + 2]);
                }
                Entity::Voxel(k) => {
                    let b = out.bindings.get_mut(&k).expect("active");
                    let w = Vector3::new(delta[off], delta[off + 1], delta[off + 2]);
                    let q = UnitQuaternion::from_scaled_axis(w) * b.rotation;
                    b.rotation = UnitQuaternion::new_normalize(q.into_inner());
                    b.translation += Vector3::new(delta[off + 3], delta[off + 4], delta[off + 5]);
                    for (j, d) in b.spec.dims.iter_mut().enumerate() {
                        *d += delta[off + 6 + j];
                    }
                }
            }
        }
        out
    }

    /// `∂x/∂θ` for a vertex: column offset and 3×k block per active entity.
    fn vertex_jacobian(&self, state: &GeometryState, v: VertexId) -> Option<(usize, DMatrix<f64>)> {
        match self.member_of.get(&v) {
            Some((k, i)) => {
                let off = *self.offsets.get(&Entity::Voxel(*k))?;
                let b = &state.bindings[k];
                let rot = b.rotation.to_rotation_matrix().into_inner();
                let local = b.local_position(*i);
                let rl = rot * local.coords;
                let nd = b.spec.dims.len();
                let mut j = DMatrix::zeros(3, 6 + nd);
                j.view_mut((0, 0), (3, 3)).copy_from(&(-skew(&rl)));
                j.view_mut((0, 3), (3, 3)).copy_from(&Matrix3::identity());
                let jl = b.template().local_jacobian(*i);
                j.view_mut((0, 6), (3, nd)).copy_from(&(rot * jl));
                Some((off, j))
            }
            None => {
                let off = *self.offsets.get(&Entity::Vertex(v))?;
                Some((off, DMatrix::identity(3, 3)))
            }
        }
    }

    fn spatial_rows(&self, c: &SpatialConstraint) -> usize {
        match (&c.kind, &c.refs) {
            (SpatialKind::Coplanar, SpatialRefs::Vertices(v)) => v.len(),
            (SpatialKind::Collinear, SpatialRefs::Vertices(v)) => 2 * v.len(),
            (SpatialKind::FacesParallel, _) => 3,
            (SpatialKind::FacesPerpendicular, _) => 1,
            _ => 0,
        }
    }

    pub fn num_residuals(&self) -> usize {
        2 * self.observations.len() + self.spatials.iter().map(|c| self.spatial_rows(c)).sum::<usize>()
    }

    fn face_normal(&self, state: &GeometryState, f: crate::mesh::FaceId) -> Option<Vector3<f64>> {
        let pts: Vec<Point3<f64>> = self.faces[&f].iter().map(|v| self.position(state, *v)).collect();
        newell_normal(&pts)
    }

    fn face_pair_residual(&self, c: &SpatialConstraint, state: &GeometryState) -> Vec<f64> {
        let SpatialRefs::Faces([a, b]) = &c.refs else { return vec![] };
        let (Some(na), Some(nb)) = (self.face_normal(state, *a), self.face_normal(state, *b)) else {
            return vec![0.0; self.spatial_rows(c)];
        };
        match c.kind {
            SpatialKind::FacesParallel => {
                let x = na.cross(&nb);
                vec![x.x, x.y, x.z]
            }
            _ => vec![na.dot(&nb)],
        }
    }

    /// Projection residuals `√w (π(P x) − m)` followed by spatial residuals
    /// scaled by `√penalty`.
    pub fn residuals(&self, state: &GeometryState, penalty: f64) -> DVector<f64> {
        self.evaluate(state, penalty, false).0
    }

    pub fn jacobian(&self, state: &GeometryState, penalty: f64) -> DMatrix<f64> {
        self.evaluate(state, penalty, true).1.expect("requested")
    }

    pub(crate) fn evaluate(&self, state: &GeometryState, penalty: f64, with_jacobian: bool) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let m = self.num_residuals();
        let mut r = DVector::zeros(m);
        let mut jac = with_jacobian.then(|| DMatrix::zeros(m, self.num_params));
        let mut row = 0;
        for o in &self.observations {
            let cam = &self.cameras[&o.image];
            let x = self.position(state, o.vertex);
            let (u, du_dx) = project_with_jacobian(cam, &x);
            let res = (u - o.pixel) * o.sqrt_weight;
            r[row] = res.x;
            r[row + 1] = res.y;
            if let Some(j) = jac.as_mut() {
                if let Some((off, vj)) = self.vertex_jacobian(state, o.vertex) {
                    let block = DMatrix::from_fn(2, 3, |a, b| du_dx[(a, b)] * o.sqrt_weight) * &vj;
                    let cols = block.ncols();
                    let mut view = j.view_mut((row, off), (2, cols));
                    view += &block;
                }
            }
            row += 2;
        }
        let sp = penalty.sqrt();
        for c in &self.spatials {
            let rows = self.spatial_rows(c);
            match (&c.kind, &c.refs) {
                (SpatialKind::Coplanar | SpatialKind::Collinear, SpatialRefs::Vertices(vs)) => {
                    let pts: Vec<Point3<f64>> = vs.iter().map(|v| self.position(state, *v)).collect();
                    let n = pts.len() as f64;
                    let centroid = pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / n;
                    let axes = fit_axes(&pts, &centroid);
                    let dirs: Vec<Vector3<f64>> = if c.kind == SpatialKind::Coplanar { vec![axes[2]] } else { vec![axes[1], axes[2]] };
                    let per = dirs.len();
                    for (k, p) in pts.iter().enumerate() {
                        for (d, dir) in dirs.iter().enumerate() {
                            r[row + per * k + d] = sp * dir.dot(&(p.coords - centroid));
                        }
                    }
                    if let Some(j) = jac.as_mut() {
                        for (l, v) in vs.iter().enumerate() {
                            let Some((off, vj)) = self.vertex_jacobian(state, *v) else { continue };
                            for k in 0..pts.len() {
                                let coef = sp * (if k == l { 1.0 } else { 0.0 } - 1.0 / n);
                                for (d, dir) in dirs.iter().enumerate() {
                                    let g = (dir.transpose() * &vj) * coef;
                                    let mut view = j.view_mut((row + per * k + d, off), (1, vj.ncols()));
                                    view += &g;
                                }
                            }
                        }
                    }
                }
                (SpatialKind::FacesParallel | SpatialKind::FacesPerpendicular, SpatialRefs::Faces(_)) => {
                    let base = self.face_pair_residual(c, state);
                    for (k, x) in base.iter().enumerate() {
                        r[row + k] = sp * x;
                    }
                    if let Some(j) = jac.as_mut() {
                        self.face_pair_jacobian(c, state, sp, row, j);
                    }
                }
                _ => {}
            }
            row += rows;
        }
        (r, jac)
    }

    /// Central differences through vertex positions, chained with `∂x/∂θ`.
    fn face_pair_jacobian(&self, c: &SpatialConstraint, state: &GeometryState, sp: f64, row: usize, j: &mut DMatrix<f64>) {
        let SpatialRefs::Faces(fs) = &c.refs else { return };
        let mut verts: Vec<VertexId> = fs.iter().flat_map(|f| self.faces[f].iter().copied()).collect();
        verts.sort();
        verts.dedup();
        let eval = |moved: VertexId, p: Point3<f64>| -> Vec<f64> {
            let normal = |f: &crate::mesh::FaceId| {
                let pts: Vec<Point3<f64>> = self.faces[f].iter().map(|v| if *v == moved { p } else { self.position(state, *v) }).collect();
                newell_normal(&pts)
            };
            match (normal(&fs[0]), normal(&fs[1])) {
                (Some(na), Some(nb)) => match c.kind {
                    SpatialKind::FacesParallel => {
                        let x = na.cross(&nb);
                        vec![x.x, x.y, x.z]
                    }
                    _ => vec![na.dot(&nb)],
                },
                _ => vec![0.0; self.spatial_rows(c)],
            }
        };
        for v in verts {
            let Some((off, vj)) = self.vertex_jacobian(state, v) else { continue };
            let p = self.position(state, v);
            let mut dr = DMatrix::zeros(self.spatial_rows(c), 3);
            for a in 0..3 {
                let h = 1e-6 * p[a].abs().max(1.0);
                let mut plus = p;
                plus[a] += h;
                let mut minus = p;
                minus[a] -= h;
                let (rp, rm) = (eval(v, plus), eval(v, minus));
                for k in 0..rp.len() {
                    dr[(k, a)] = sp * (rp[k] - rm[k]) / (2.0 * h);
                }
            }
            let block = dr * &vj;
            let mut view = j.view_mut((row, off), (block.nrows(), block.ncols()));
            view += &block;
        }
    }

    /// Entities spanning near-null directions of `JᵀJ` (column-scaled).
    pub(crate) fn null_entities(&self, state: &GeometryState, penalty: f64) -> BTreeSet<Entity> {
        let mut out = BTreeSet::new();
        if self.num_params == 0 {
            return out;
        }
        let j = self.jacobian(state, penalty);
        let scale: Vec<f64> = (0..j.ncols()).map(|c| j.column(c).norm()).collect();
        let mut js = j.clone();
        for (c, s) in scale.iter().enumerate() {
            if *s > 0.0 {
                js.column_mut(c).unscale_mut(*s);
            }
        }
        let jtj = js.transpose() * &js;
        let eig = SymmetricEigen::new(jtj);
        let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        let entities: Vec<(Entity, usize, usize)> = self.entities().map(|(e, off)| (e, off, entity_size(e, &self.initial))).collect();
        for (k, lambda) in eig.eigenvalues.iter().enumerate() {
            if *lambda > 1e-10 * max && max > 0.0 {
                continue;
            }
            let vec = eig.eigenvectors.column(k);
            let blocks: Vec<(Entity, f64)> = entities.iter().map(|(e, off, n)| (*e, vec.rows(*off, *n).norm())).collect();
            let strong: Vec<Entity> = blocks.iter().filter(|(_, w)| *w > 0.5).map(|(e, _)| *e).collect();
            if strong.is_empty() {
                if let Some((e, _)) = blocks.iter().max_by(|a, b| a.1.total_cmp(&b.1)) {
                    out.insert(*e);
                }
            } else {
                out.extend(strong);
            }
        }
        for (c, s) in scale.iter().enumerate() {
            if *s == 0.0 {
                if let Some((e, _, _)) = entities.iter().find(|(_, off, n)| c >= *off && c < off + n) {
                    out.insert(*e);
                }
            }
        }
        out
    }

    pub(crate) fn observations(&self) -> &[Observation] {
        &self.observations
    }
}

/// Orthonormal principal axes of a point set, by decreasing spread.
fn fit_axes(pts: &[Point3<f64>], centroid: &Vector3<f64>) -> [Vector3<f64>; 3] {
    let mut cov = Matrix3::zeros();
    for p in pts {
        let d = p.coords - centroid;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov);
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let col = |i: usize| -> Vector3<f64> { eig.eigenvectors.column(i).into_owned() };
    let a0 = col(idx[0]);
    let a1 = col(idx[1]);
    let a2 = a0.cross(&a1);
    [a0, a1, a2]
}

/// Pixel projection and its derivative with respect to the world point.
pub(crate) fn project_with_jacobian(cam: &Camera, x: &Point3<f64>) -> (Point2<f64>, Matrix2x3<f64>) {
    let r = cam.rotation_matrix();
    let kr = cam.intrinsics * r;
    let p = kr * x.coords + cam.intrinsics * cam.translation;
    let z = p.z;
    let u = Point2::new(p.x / z, p.y / z);
    let dp = Matrix2x3::new(1.0 / z, 0.0, -p.x / (z * z), 0.0, 1.0 / z, -p.y / (z * z));
    (u, dp * kr)
}

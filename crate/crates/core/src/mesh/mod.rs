//! Half-edge mesh holding topology, vertex positions, face materials and
//! per-corner texture coordinates, plus the reversible topology operators.
//!
//! Ids are indices into append-only tables. A removed element leaves a
//! tombstone, so ids stay stable across unrelated edits and are never handed
//! out twice by the operators. Edge `k` owns half-edges `2k` and `2k + 1`.

mod obj;
mod primitive;
mod validate;

pub use obj::{parse_obj_vertices, write_mtl, write_obj};
pub use primitive::{PrimitiveKind, PrimitiveSpec, PrimitiveTemplate};
pub use validate::ValidityReport;

use nalgebra::{Isometry3, Point3, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use thiserror::Error;

macro_rules! id_type {
    ($(#[$meta:meta])* $name:ident, $prefix:literal) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub u32);

        impl $name {
            #[inline]
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl std::fmt::Display for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_type!(VertexId, "v");
id_type!(HalfEdgeId, "h");
id_type!(EdgeId, "e");
id_type!(FaceId, "f");

impl EdgeId {
    pub fn half(self, side: u32) -> HalfEdgeId {
        HalfEdgeId(self.0 * 2 + side)
    }
}

impl HalfEdgeId {
    pub fn edge(self) -> EdgeId {
        EdgeId(self.0 / 2)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MeshError {
    #[error("invalid primitive: {0}")]
    InvalidPrimitive(String),
    #[error("{0} not found")]
    NotFound(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("operator not invertible here: {0}")]
    NotInvertibleHere(String),
    #[error("vertices {0} and {1} share no face")]
    NoSharedFace(VertexId, VertexId),
    #[error("edge between {0} and {1} already exists")]
    DuplicateEdge(VertexId, VertexId),
}

impl MeshError {
    pub fn kind(&self) -> &'static str {
        match self {
            MeshError::InvalidPrimitive(_) => "InvalidPrimitive",
            MeshError::NotFound(_) => "NotFound",
            MeshError::InvalidParameter(_) => "InvalidParameter",
            MeshError::NotInvertibleHere(_) => "NotInvertibleHere",
            MeshError::NoSharedFace(..) => "NoSharedFace",
            MeshError::DuplicateEdge(..) => "DuplicateEdge",
        }
    }
}

pub type Result<T> = std::result::Result<T, MeshError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vertex {
    pub position: Point3<f64>,
    pub(crate) outgoing: Option<HalfEdgeId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HalfEdge {
    pub origin: VertexId,
    pub twin: HalfEdgeId,
    pub next: HalfEdgeId,
    pub prev: HalfEdgeId,
    /// `None` on a boundary loop.
    pub face: Option<FaceId>,
    /// Texture coordinate of the corner at `origin` inside `face`.
    pub uv: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Face {
    pub halfedge: HalfEdgeId,
    pub material: u32,
    /// Set when a topology edit made the corner texture coordinates meaningless.
    pub uv_stale: bool,
}

/// Allocation high-water marks of the three id tables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Watermark {
    pub vertices: u32,
    pub half_edges: u32,
    pub faces: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    vertices: Vec<Option<Vertex>>,
    half_edges: Vec<Option<HalfEdge>>,
    faces: Vec<Option<Face>>,
}

/// Ids produced by [`Mesh::add_primitive`], in canonical template order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveIds {
    pub vertices: Vec<VertexId>,
    pub faces: Vec<FaceId>,
}

/// Builds a standalone mesh for one predefined voxel centered at the origin.
pub fn k_create(spec: &PrimitiveSpec) -> Result<Mesh> {
    let mut mesh = Mesh::new();
    mesh.add_primitive(spec, &Isometry3::identity())?;
    Ok(mesh)
}

impl Mesh {
    pub fn new() -> Self {
        Self::default()
    }

    // ---- accessors -------------------------------------------------------

    pub fn vertex(&self, v: VertexId) -> Option<&Vertex> {
        self.vertices.get(v.index()).and_then(Option::as_ref)
    }

    pub fn half_edge(&self, h: HalfEdgeId) -> Option<&HalfEdge> {
        self.half_edges.get(h.index()).and_then(Option::as_ref)
    }

    pub fn face(&self, f: FaceId) -> Option<&Face> {
        self.faces.get(f.index()).and_then(Option::as_ref)
    }

    pub fn contains_vertex(&self, v: VertexId) -> bool {
        self.vertex(v).is_some()
    }

    pub fn contains_edge(&self, e: EdgeId) -> bool {
        self.half_edge(e.half(0)).is_some()
    }

    pub fn contains_face(&self, f: FaceId) -> bool {
        self.face(f).is_some()
    }

    pub fn position(&self, v: VertexId) -> Option<Point3<f64>> {
        self.vertex(v).map(|x| x.position)
    }

    /// V-op: overwrite a vertex position.
    pub fn set_position(&mut self, v: VertexId, p: Point3<f64>) -> Result<()> {
        let vert = self.vertex_mut(v)?;
        vert.position = p;
        Ok(())
    }

    pub fn vertex_ids(&self) -> impl Iterator<Item = VertexId> + '_ {
        live_ids(&self.vertices).map(VertexId)
    }

    pub fn face_ids(&self) -> impl Iterator<Item = FaceId> + '_ {
        live_ids(&self.faces).map(FaceId)
    }

    pub fn half_edge_ids(&self) -> impl Iterator<Item = HalfEdgeId> + '_ {
        live_ids(&self.half_edges).map(HalfEdgeId)
    }

    pub fn edge_ids(&self) -> impl Iterator<Item = EdgeId> + '_ {
        self.half_edge_ids().filter(|h| h.0 % 2 == 0).map(HalfEdgeId::edge)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertex_ids().count()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_ids().count()
    }

    pub fn num_faces(&self) -> usize {
        self.face_ids().count()
    }

    pub fn euler_characteristic(&self) -> i64 {
        self.num_vertices() as i64 - self.num_edges() as i64 + self.num_faces() as i64
    }

    pub fn watermark(&self) -> Watermark {
        Watermark {
            vertices: self.vertices.len() as u32,
            half_edges: self.half_edges.len() as u32,
            faces: self.faces.len() as u32,
        }
    }

    /// Drops trailing tombstones back to `mark`. Only tombstones may be dropped;
    /// used when an operator and its inverse are rolled back together.
    pub fn restore_watermark(&mut self, mark: Watermark) -> Result<()> {
        fn trim<T>(table: &mut Vec<Option<T>>, len: u32, what: &str) -> Result<()> {
            let len = len as usize;
            if table.len() < len || table[len.min(table.len())..].iter().any(Option::is_some) {
                return Err(MeshError::InvalidParameter(format!("cannot roll {what} back to {len}")));
            }
            table.truncate(len);
            Ok(())
        }
        trim(&mut self.vertices, mark.vertices, "vertices")?;
        trim(&mut self.half_edges, mark.half_edges, "half-edges")?;
        trim(&mut self.faces, mark.faces, "faces")
    }

    /// Endpoints of an edge as (origin of half-edge `2k`, its destination).
    pub fn edge_endpoints(&self, e: EdgeId) -> Option<(VertexId, VertexId)> {
        let h = self.half_edge(e.half(0))?;
        let t = self.half_edge(h.twin)?;
        Some((h.origin, t.origin))
    }

    pub fn find_edge(&self, a: VertexId, b: VertexId) -> Option<EdgeId> {
        self.outgoing(a)
            .into_iter()
            .find(|&h| self.dest(h) == Some(b))
            .map(HalfEdgeId::edge)
    }

    pub fn dest(&self, h: HalfEdgeId) -> Option<VertexId> {
        let he = self.half_edge(h)?;
        Some(self.half_edge(he.twin)?.origin)
    }

    /// Outgoing half-edges of `v`, in umbrella order.
    pub fn outgoing(&self, v: VertexId) -> Vec<HalfEdgeId> {
        let Some(start) = self.vertex(v).and_then(|x| x.outgoing) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        let mut h = start;
        let limit = self.half_edges.len() + 1;
        loop {
            out.push(h);
            let Some(next) = self.half_edge(h).and_then(|he| self.half_edge(he.twin)).map(|t| t.next) else {
                break;
            };
            h = next;
            if h == start || out.len() > limit {
                break;
            }
        }
        out
    }

    pub fn valence(&self, v: VertexId) -> usize {
        self.outgoing(v).len()
    }

    /// Half-edges of the loop starting at `start`.
    pub fn cycle(&self, start: HalfEdgeId) -> Vec<HalfEdgeId> {
        let mut out = Vec::new();
        let mut h = start;
        let limit = self.half_edges.len() + 1;
        loop {
            out.push(h);
            match self.half_edge(h) {
                Some(he) => h = he.next,
                None => break,
            }
            if h == start || out.len() > limit {
                break;
            }
        }
        out
    }

    pub fn face_halfedges(&self, f: FaceId) -> Vec<HalfEdgeId> {
        self.face(f).map(|face| self.cycle(face.halfedge)).unwrap_or_default()
    }

    /// Corner vertices of a face in boundary order, starting at its anchor half-edge.
    pub fn face_vertices(&self, f: FaceId) -> Vec<VertexId> {
        self.face_halfedges(f)
            .into_iter()
            .filter_map(|h| self.half_edge(h).map(|he| he.origin))
            .collect()
    }

    pub fn face_positions(&self, f: FaceId) -> Vec<Point3<f64>> {
        self.face_vertices(f).into_iter().filter_map(|v| self.position(v)).collect()
    }

    /// Unit normal by Newell's method (outward for counter-clockwise faces).
    pub fn face_normal(&self, f: FaceId) -> Option<Vector3<f64>> {
        newell_normal(&self.face_positions(f))
    }

    pub fn face_centroid(&self, f: FaceId) -> Option<Point3<f64>> {
        let pts = self.face_positions(f);
        if pts.is_empty() {
            return None;
        }
        let sum = pts.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords);
        Some(Point3::from(sum / pts.len() as f64))
    }

    /// Maximum distance of a face corner from the best-fit plane of the face.
    pub fn planarity_residual(&self, f: FaceId) -> Option<f64> {
        let pts = self.face_positions(f);
        if pts.len() < 3 {
            return None;
        }
        let (c, n, _) = crate::linalg::fit_plane(&pts);
        Some(pts.iter().map(|p| (p - c).dot(&n).abs()).fold(0.0, f64::max))
    }

    pub fn faces_of_vertex(&self, v: VertexId) -> Vec<FaceId> {
        let mut faces: Vec<FaceId> = self
            .outgoing(v)
            .into_iter()
            .filter_map(|h| self.half_edge(h).and_then(|he| he.face))
            .collect();
        faces.sort();
        faces.dedup();
        faces
    }

    /// All vertices connected to `v`.
    pub fn component_of(&self, v: VertexId) -> BTreeSet<VertexId> {
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::from([v]);
        while let Some(x) = queue.pop_front() {
            if !self.contains_vertex(x) || !seen.insert(x) {
                continue;
            }
            for h in self.outgoing(x) {
                if let Some(d) = self.dest(h) {
                    queue.push_back(d);
                }
            }
        }
        seen
    }

    // ---- construction ----------------------------------------------------

    /// K-create: appends a voxel as a new closed component placed by `pose`.
    pub fn add_primitive(&mut self, spec: &PrimitiveSpec, pose: &Isometry3<f64>) -> Result<PrimitiveIds> {
        let template = spec.template()?;
        let positions: Vec<Point3<f64>> = template.local_positions(&spec.dims).iter().map(|p| pose * p).collect();
        self.add_polyhedron(&positions, &template.faces, 0)
    }

    /// Appends a closed 2-manifold polyhedron given by corner lists.
    pub fn add_polyhedron(&mut self, positions: &[Point3<f64>], faces: &[Vec<usize>], material: u32) -> Result<PrimitiveIds> {
        let v0 = self.vertices.len() as u32;
        let vids: Vec<VertexId> = (0..positions.len() as u32).map(|i| VertexId(v0 + i)).collect();
        let mut directed: BTreeMap<(usize, usize), HalfEdgeId> = BTreeMap::new();
        let mut next_half = self.half_edges.len() as u32;
        let mut used = BTreeSet::new();
        // Allocate one edge pair per undirected edge, in first-seen order.
        for face in faces {
            if face.len() < 3 {
                return Err(MeshError::InvalidPrimitive("face with fewer than 3 corners".into()));
            }
            for i in 0..face.len() {
                let (a, b) = (face[i], face[(i + 1) % face.len()]);
                if a >= positions.len() || b >= positions.len() || a == b {
                    return Err(MeshError::InvalidPrimitive("bad corner index".into()));
                }
                if !used.insert((a, b)) {
                    return Err(MeshError::InvalidPrimitive("inconsistent face orientation".into()));
                }
                if !directed.contains_key(&(b, a)) {
                    directed.insert((a, b), HalfEdgeId(next_half));
                    directed.insert((b, a), HalfEdgeId(next_half + 1));
                    next_half += 2;
                }
            }
        }
        if used.len() != directed.len() {
            return Err(MeshError::InvalidPrimitive("polyhedron is not closed".into()));
        }

        let f0 = self.faces.len() as u32;
        let mut halves: Vec<Option<HalfEdge>> = vec![None; (next_half - self.half_edges.len() as u32) as usize];
        let base = self.half_edges.len() as u32;
        let mut outgoing: Vec<Option<HalfEdgeId>> = vec![None; positions.len()];
        let mut face_ids = Vec::with_capacity(faces.len());
        let mut new_faces = Vec::with_capacity(faces.len());
        for (fi, face) in faces.iter().enumerate() {
            let fid = FaceId(f0 + fi as u32);
            let n = face.len();
            let hs: Vec<HalfEdgeId> = (0..n).map(|i| directed[&(face[i], face[(i + 1) % n])]).collect();
            for i in 0..n {
                let (a, b) = (face[i], face[(i + 1) % n]);
                let twin = directed[&(b, a)];
                halves[(hs[i].0 - base) as usize] = Some(HalfEdge {
                    origin: vids[a],
                    twin,
                    next: hs[(i + 1) % n],
                    prev: hs[(i + n - 1) % n],
                    face: Some(fid),
                    uv: None,
                });
                outgoing[a].get_or_insert(hs[i]);
            }
            new_faces.push(Some(Face { halfedge: hs[0], material, uv_stale: false }));
            face_ids.push(fid);
        }
        for (i, p) in positions.iter().enumerate() {
            if outgoing[i].is_none() {
                return Err(MeshError::InvalidPrimitive(format!("corner {i} is not used by any face")));
            }
            self.vertices.push(Some(Vertex { position: *p, outgoing: outgoing[i] }));
        }
        self.half_edges.extend(halves);
        self.faces.extend(new_faces);
        Ok(PrimitiveIds { vertices: vids, faces: face_ids })
    }

    /// Removes the whole connected component containing `v`.
    pub fn remove_component(&mut self, v: VertexId) -> Result<BTreeSet<VertexId>> {
        if !self.contains_vertex(v) {
            return Err(MeshError::NotFound(v.to_string()));
        }
        let verts = self.component_of(v);
        let halves: Vec<HalfEdgeId> = verts.iter().flat_map(|&x| self.outgoing(x)).collect();
        for h in halves {
            if let Some(f) = self.half_edge(h).and_then(|he| he.face) {
                self.faces[f.index()] = None;
            }
            self.half_edges[h.index()] = None;
        }
        for &x in &verts {
            self.vertices[x.index()] = None;
        }
        Ok(verts)
    }

    // ---- topology operators ----------------------------------------------

    /// E-split: inserts a vertex at fraction `t` along `edge` (measured from the
    /// origin of half-edge `2k`). Returns the new vertex and the new edge, which
    /// runs from the new vertex to the former destination.
    pub fn e_split(&mut self, edge: EdgeId, t: f64) -> Result<(VertexId, EdgeId)> {
        if !(t > 0.0 && t < 1.0) {
            return Err(MeshError::InvalidParameter(format!("split fraction {t} outside (0,1)")));
        }
        let h = edge.half(0);
        let hr = self.he(h)?.clone();
        let g = hr.twin;
        let gr = self.he(g)?.clone();
        let (a, b) = (hr.origin, gr.origin);
        let pa = self.vertex(a).ok_or_else(|| nf(a))?.position;
        let pb = self.vertex(b).ok_or_else(|| nf(b))?.position;

        let m = VertexId(self.vertices.len() as u32);
        let hn = HalfEdgeId(self.half_edges.len() as u32);
        let gn = HalfEdgeId(hn.0 + 1);

        let uv_a1 = hr.uv;
        let uv_b1 = self.he(hr.next)?.uv;
        let uv_b2 = gr.uv;
        let uv_a2 = self.he(gr.next)?.uv;

        self.vertices.push(Some(Vertex { position: pa + (pb - pa) * t, outgoing: Some(hn) }));
        self.half_edges.push(Some(HalfEdge {
            origin: m,
            twin: gn,
            next: hr.next,
            prev: h,
            face: hr.face,
            uv: lerp_uv(uv_a1, uv_b1, t),
        }));
        self.half_edges.push(Some(HalfEdge {
            origin: b,
            twin: hn,
            next: g,
            prev: gr.prev,
            face: gr.face,
            uv: uv_b2,
        }));
        self.he_mut(hr.next).prev = hn;
        self.he_mut(h).next = hn;
        self.he_mut(gr.prev).next = gn;
        {
            let gm = self.he_mut(g);
            gm.prev = gn;
            gm.origin = m;
            gm.uv = lerp_uv(uv_a2, uv_b2, t);
        }
        let vb = self.vertices[b.index()].as_mut().expect("live");
        if vb.outgoing == Some(g) {
            vb.outgoing = Some(gn);
        }
        Ok((m, gn.edge()))
    }

    /// V-delete: removes a valence-2 vertex, merging its two edges. The edge
    /// with the larger id is the one removed, which makes this the exact
    /// inverse of [`Mesh::e_split`].
    pub fn v_delete(&mut self, m: VertexId) -> Result<EdgeId> {
        if !self.contains_vertex(m) {
            return Err(nf(m));
        }
        let out = self.outgoing(m);
        if out.len() != 2 {
            return Err(MeshError::NotInvertibleHere(format!("{m} has valence {}", out.len())));
        }
        let (e0, e1) = (out[0].edge(), out[1].edge());
        let (o1, o2) = if e0 > e1 { (out[0], out[1]) } else { (out[1], out[0]) };
        let o1r = self.he(o1)?.clone();
        let o2r = self.he(o2)?.clone();
        let (i2, i1) = (o1r.twin, o2r.twin);
        let i2r = self.he(i2)?.clone();
        let p = i2r.origin;
        let q = self.he(i1)?.origin;
        if p == q {
            return Err(MeshError::NotInvertibleHere(format!("{m} joins a doubled edge")));
        }
        for &f in [o1r.face, i2r.face].iter().flatten() {
            if self.face_halfedges(f).len() < 4 {
                return Err(MeshError::NotInvertibleHere(format!("{f} would become a bigon")));
            }
        }
        if self.find_edge(p, q).is_some() {
            return Err(MeshError::NotInvertibleHere(format!("{p} and {q} are already adjacent")));
        }

        self.he_mut(i1).next = o1r.next;
        self.he_mut(o1r.next).prev = i1;
        {
            let o2m = self.he_mut(o2);
            o2m.origin = p;
            o2m.prev = i2r.prev;
            o2m.uv = i2r.uv;
        }
        self.he_mut(i2r.prev).next = o2;
        let vp = self.vertices[p.index()].as_mut().expect("live");
        if vp.outgoing == Some(i2) {
            vp.outgoing = Some(o2);
        }
        if let Some(f) = o1r.face {
            let face = self.faces[f.index()].as_mut().expect("live");
            if face.halfedge == o1 {
                face.halfedge = i1;
            }
        }
        if let Some(f) = i2r.face {
            let face = self.faces[f.index()].as_mut().expect("live");
            if face.halfedge == i2 {
                face.halfedge = o2;
            }
        }
        self.half_edges[o1.index()] = None;
        self.half_edges[i2.index()] = None;
        self.vertices[m.index()] = None;
        Ok(o2.edge())
    }

    /// V-connect: splits the face shared by `a` and `b` with a new edge from `a`
    /// to `b`. The part holding the old face anchor keeps the face id.
    pub fn v_connect(&mut self, a: VertexId, b: VertexId) -> Result<(EdgeId, FaceId)> {
        self.v_connect_in(a, b, None)
    }

    /// V-connect within a given face, for vertex pairs that share several.
    pub fn v_connect_in(&mut self, a: VertexId, b: VertexId, face: Option<FaceId>) -> Result<(EdgeId, FaceId)> {
        if a == b {
            return Err(MeshError::InvalidParameter("cannot connect a vertex to itself".into()));
        }
        if !self.contains_vertex(a) {
            return Err(nf(a));
        }
        if !self.contains_vertex(b) {
            return Err(nf(b));
        }
        if self.find_edge(a, b).is_some() {
            return Err(MeshError::DuplicateEdge(a, b));
        }
        let fb = self.faces_of_vertex(b);
        let Some(f) = self.faces_of_vertex(a).into_iter().find(|f| fb.contains(f) && face.is_none_or(|g| g == *f)) else {
            return Err(MeshError::NoSharedFace(a, b));
        };
        let cyc = self.face_halfedges(f);
        let find = |v: VertexId, mesh: &Mesh| cyc.iter().copied().find(|&h| mesh.half_edge(h).map(|x| x.origin) == Some(v));
        let ha = find(a, self).expect("corner");
        let hb = find(b, self).expect("corner");
        let har = self.he(ha)?.clone();
        let hbr = self.he(hb)?.clone();
        if self.he(har.next)?.origin == b || self.he(hbr.next)?.origin == a {
            return Err(MeshError::DuplicateEdge(a, b));
        }
        let (pa, pb) = (har.prev, hbr.prev);
        let x = HalfEdgeId(self.half_edges.len() as u32);
        let y = HalfEdgeId(x.0 + 1);
        let anchor = self.face(f).expect("live").halfedge;
        let face_rec = self.face(f).expect("live").clone();

        self.half_edges.push(Some(HalfEdge { origin: a, twin: y, next: hb, prev: pa, face: Some(f), uv: har.uv }));
        self.half_edges.push(Some(HalfEdge { origin: b, twin: x, next: ha, prev: pb, face: Some(f), uv: hbr.uv }));
        self.he_mut(pa).next = x;
        self.he_mut(hb).prev = x;
        self.he_mut(pb).next = y;
        self.he_mut(ha).prev = y;

        let cycle_a = self.cycle(ha);
        let cycle_b = self.cycle(hb);
        let (moved, start) = if cycle_a.contains(&anchor) { (cycle_b, hb) } else { (cycle_a, ha) };
        let nf_id = FaceId(self.faces.len() as u32);
        for h in moved {
            self.he_mut(h).face = Some(nf_id);
        }
        self.faces.push(Some(Face { halfedge: start, material: face_rec.material, uv_stale: face_rec.uv_stale }));
        Ok((x.edge(), nf_id))
    }

    /// E-delete: removes an interior edge and merges its two faces into the one
    /// with the smaller id. Returns the surviving face.
    pub fn e_delete(&mut self, edge: EdgeId) -> Result<FaceId> {
        let h = edge.half(0);
        let hr = self.he(h)?.clone();
        let g = hr.twin;
        let gr = self.he(g)?.clone();
        let (Some(fh), Some(fg)) = (hr.face, gr.face) else {
            return Err(MeshError::NotInvertibleHere(format!("{edge} lies on the boundary")));
        };
        if fh == fg {
            return Err(MeshError::NotInvertibleHere(format!("{edge} borders a single face")));
        }
        let mut merged = Vec::new();
        let mut cur = gr.next;
        while cur != g {
            merged.push(cur);
            cur = self.he(cur)?.next;
        }
        cur = hr.next;
        while cur != h {
            merged.push(cur);
            cur = self.he(cur)?.next;
        }
        let corners: Vec<VertexId> = merged.iter().map(|&x| self.half_edges[x.index()].as_ref().expect("live").origin).collect();
        let distinct: BTreeSet<_> = corners.iter().collect();
        if corners.len() < 3 || distinct.len() != corners.len() {
            return Err(MeshError::NotInvertibleHere(format!("removing {edge} leaves a non-simple face")));
        }
        let keep = fh.min(fg);
        let drop = fh.max(fg);
        // Merged corners keep their coordinates, but the union is no longer one chart.
        let had_uvs = merged.iter().any(|&x| self.half_edges[x.index()].as_ref().expect("live").uv.is_some());
        let stale = had_uvs || self.faces[fh.index()].as_ref().is_some_and(|f| f.uv_stale) || self.faces[fg.index()].as_ref().is_some_and(|f| f.uv_stale);

        self.he_mut(hr.prev).next = gr.next;
        self.he_mut(gr.next).prev = hr.prev;
        self.he_mut(gr.prev).next = hr.next;
        self.he_mut(hr.next).prev = gr.prev;
        for &x in &merged {
            self.he_mut(x).face = Some(keep);
        }
        {
            let face = self.faces[keep.index()].as_mut().expect("live");
            if face.halfedge == h || face.halfedge == g {
                face.halfedge = hr.next;
            }
            face.uv_stale = stale;
        }
        let va = self.vertices[hr.origin.index()].as_mut().expect("live");
        if va.outgoing == Some(h) {
            va.outgoing = Some(gr.next);
        }
        let vb = self.vertices[gr.origin.index()].as_mut().expect("live");
        if vb.outgoing == Some(g) {
            vb.outgoing = Some(hr.next);
        }
        self.half_edges[h.index()] = None;
        self.half_edges[g.index()] = None;
        self.faces[drop.index()] = None;
        Ok(keep)
    }

    /// Writes the corner texture coordinates of a face (in face-corner order).
    pub fn set_face_uvs(&mut self, f: FaceId, uvs: &[[f64; 2]]) -> Result<()> {
        let hs = self.face_halfedges(f);
        if hs.is_empty() {
            return Err(nf(f));
        }
        if hs.len() != uvs.len() {
            return Err(MeshError::InvalidParameter(format!("{f} has {} corners, got {} uvs", hs.len(), uvs.len())));
        }
        for (h, uv) in hs.into_iter().zip(uvs) {
            self.he_mut(h).uv = Some(*uv);
        }
        self.faces[f.index()].as_mut().expect("live").uv_stale = false;
        Ok(())
    }

    pub fn face_uvs(&self, f: FaceId) -> Option<Vec<[f64; 2]>> {
        let face = self.face(f)?;
        if face.uv_stale {
            return None;
        }
        self.face_halfedges(f).into_iter().map(|h| self.half_edge(h).and_then(|x| x.uv)).collect()
    }

    pub fn clear_uvs(&mut self) {
        for he in self.half_edges.iter_mut().flatten() {
            he.uv = None;
        }
        for f in self.faces.iter_mut().flatten() {
            f.uv_stale = false;
        }
    }

    /// Compares topology and positions id by id, ignoring texture attributes.
    pub fn same_shape(&self, other: &Mesh) -> bool {
        let strip = |m: &Mesh| {
            let hs: Vec<_> = m
                .half_edges
                .iter()
                .map(|h| h.as_ref().map(|h| (h.origin, h.twin, h.next, h.prev, h.face)))
                .collect();
            let fs: Vec<_> = m.faces.iter().map(|f| f.as_ref().map(|f| (f.halfedge, f.material))).collect();
            (m.vertices.clone(), hs, fs)
        };
        strip(self) == strip(other)
    }

    pub fn validate(&self) -> ValidityReport {
        validate::validate(self)
    }

    fn he(&self, h: HalfEdgeId) -> Result<&HalfEdge> {
        self.half_edge(h).ok_or_else(|| MeshError::NotFound(format!("edge {}", h.edge())))
    }

    fn he_mut(&mut self, h: HalfEdgeId) -> &mut HalfEdge {
        self.half_edges[h.index()].as_mut().expect("live half-edge")
    }

    fn vertex_mut(&mut self, v: VertexId) -> Result<&mut Vertex> {
        self.vertices.get_mut(v.index()).and_then(Option::as_mut).ok_or_else(|| nf(v))
    }

    #[cfg(test)]
    pub(crate) fn half_edge_mut_for_test(&mut self, h: HalfEdgeId) -> &mut HalfEdge {
        self.he_mut(h)
    }
}

/// Structural isomorphism: a bijection of vertices, half-edges and faces that
/// preserves origin/twin/next/face incidence and exact vertex positions.
pub fn is_isomorphic(a: &Mesh, b: &Mesh) -> bool {
    if a.num_vertices() != b.num_vertices() || a.num_edges() != b.num_edges() || a.num_faces() != b.num_faces() {
        return false;
    }
    // Matched half-edges join equal positions, so candidates are looked up by
    // the bit patterns of both endpoints (with -0.0 folded into 0.0).
    let bits = |p: Point3<f64>| [p.x + 0.0, p.y + 0.0, p.z + 0.0].map(f64::to_bits);
    let key = |m: &Mesh, h: HalfEdgeId| {
        let he = m.half_edge(h)?;
        let dest = m.half_edge(he.twin)?.origin;
        Some((bits(m.position(he.origin)?), bits(m.position(dest)?)))
    };
    let mut index: HashMap<_, Vec<HalfEdgeId>> = HashMap::new();
    for h in b.half_edge_ids() {
        match key(b, h) {
            Some(k) => index.entry(k).or_default().push(h),
            None => return false,
        }
    }
    let mut mapped_b = vec![false; b.half_edges.len()];
    let mut h_map: Vec<Option<HalfEdgeId>> = vec![None; a.half_edges.len()];
    for seed in a.half_edge_ids() {
        if h_map[seed.index()].is_some() {
            continue;
        }
        let Some(cands) = key(a, seed).and_then(|k| index.get(&k)) else { return false };
        let Some(m) = cands.iter().filter(|c| !mapped_b[c.index()]).find_map(|c| match_from(a, b, seed, *c)) else {
            return false;
        };
        for (x, y) in m {
            if mapped_b[y.index()] {
                return false;
            }
            mapped_b[y.index()] = true;
            h_map[x.index()] = Some(y);
        }
    }
    // Faces and vertices must map consistently.
    let mut f_map = HashMap::new();
    let mut v_map = HashMap::new();
    for (x, y) in h_map.iter().enumerate().filter_map(|(i, y)| y.map(|y| (HalfEdgeId(i as u32), y))) {
        let (hx, hy) = (a.half_edge(x).unwrap(), b.half_edge(y).unwrap());
        if hx.face.is_some() != hy.face.is_some() {
            return false;
        }
        if let (Some(fx), Some(fy)) = (hx.face, hy.face) {
            if *f_map.entry(fx).or_insert(fy) != fy {
                return false;
            }
        }
        if *v_map.entry(hx.origin).or_insert(hy.origin) != hy.origin {
            return false;
        }
    }
    v_map.iter().all(|(&x, &y)| a.position(x) == b.position(y))
}

fn match_from(a: &Mesh, b: &Mesh, sa: HalfEdgeId, sb: HalfEdgeId) -> Option<BTreeMap<HalfEdgeId, HalfEdgeId>> {
    let mut map = BTreeMap::new();
    let mut rev = BTreeMap::new();
    let mut queue = VecDeque::from([(sa, sb)]);
    while let Some((x, y)) = queue.pop_front() {
        match map.get(&x) {
            Some(&mapped) if mapped == y => continue,
            Some(_) => return None,
            None => {}
        }
        if rev.contains_key(&y) {
            return None;
        }
        let (hx, hy) = (a.half_edge(x)?, b.half_edge(y)?);
        if a.position(hx.origin) != b.position(hy.origin) || hx.face.is_some() != hy.face.is_some() {
            return None;
        }
        map.insert(x, y);
        rev.insert(y, x);
        queue.push_back((hx.next, hy.next));
        queue.push_back((hx.twin, hy.twin));
        queue.push_back((hx.prev, hy.prev));
    }
    Some(map)
}

fn live_ids<T>(table: &[Option<T>]) -> impl Iterator<Item = u32> + '_ {
    table.iter().enumerate().filter(|(_, x)| x.is_some()).map(|(i, _)| i as u32)
}

fn nf(what: impl std::fmt::Display) -> MeshError {
    MeshError::NotFound(what.to_string())
}

fn lerp_uv(a: Option<[f64; 2]>, b: Option<[f64; 2]>, t: f64) -> Option<[f64; 2]> {
    match (a, b) {
        (Some(a), Some(b)) => Some([a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t]),
        _ => None,
    }
}

pub fn newell_normal(pts: &[Point3<f64>]) -> Option<Vector3<f64>> {
    if pts.len() < 3 {
        return None;
    }
    let mut n = Vector3::<f64>::zeros();
    for i in 0..pts.len() {
        let (p, q) = (pts[i], pts[(i + 1) % pts.len()]);
        n.x += (p.y - q.y) * (p.z + q.z);
        n.y += (p.z - q.z) * (p.x + q.x);
        n.z += (p.x - q.x) * (p.y + q.y);
    }
    let len = n.norm();
    (len > 0.0).then(|| n / len)
}

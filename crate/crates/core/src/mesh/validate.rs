use super::{FaceId, Mesh, VertexId};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Consistency report; structural failures make [`ValidityReport::is_valid`] false.
/// Planarity residuals are informational.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidityReport {
    pub twin_errors: Vec<String>,
    pub cycle_errors: Vec<String>,
    pub manifold_errors: Vec<String>,
    pub euler_characteristic: i64,
    pub components: usize,
    pub closed: bool,
    pub planarity: BTreeMap<FaceId, f64>,
}

impl ValidityReport {
    pub fn is_valid(&self) -> bool {
        self.twin_errors.is_empty() && self.cycle_errors.is_empty() && self.manifold_errors.is_empty()
    }

    pub fn max_planarity(&self) -> f64 {
        self.planarity.values().copied().fold(0.0, f64::max)
    }
}

pub(super) fn validate(mesh: &Mesh) -> ValidityReport {
    let mut r = ValidityReport::default();
    let mut boundary = false;

    for h in mesh.half_edge_ids() {
        let he = mesh.half_edge(h).expect("live");
        match mesh.half_edge(he.twin) {
            None => r.twin_errors.push(format!("{h}: twin {} missing", he.twin)),
            Some(t) => {
                if he.twin == h {
                    r.twin_errors.push(format!("{h} is its own twin"));
                } else if t.twin != h {
                    r.twin_errors.push(format!("{h}: twin(twin) = {}", t.twin));
                } else if mesh.half_edge(he.next).map(|n| n.origin) != Some(t.origin) {
                    r.twin_errors.push(format!("{h}: twin does not start at the destination"));
                }
                if he.face.is_none() && t.face.is_none() {
                    r.manifold_errors.push(format!("edge {} borders no face", h.edge()));
                }
            }
        }
        match mesh.half_edge(he.next) {
            Some(n) if n.prev == h => {
                if n.face != he.face {
                    r.cycle_errors.push(format!("{h}: next lies in another face"));
                }
            }
            Some(_) => r.cycle_errors.push(format!("{h}: prev(next) mismatch")),
            None => r.cycle_errors.push(format!("{h}: next missing")),
        }
        if !mesh.contains_vertex(he.origin) {
            r.cycle_errors.push(format!("{h}: origin {} missing", he.origin));
        }
        if he.face.is_none() {
            boundary = true;
        }
        if let Some(f) = he.face {
            if !mesh.contains_face(f) {
                r.cycle_errors.push(format!("{h}: face {f} missing"));
            }
        }
    }
    if !r.twin_errors.is_empty() || !r.cycle_errors.is_empty() {
        r.euler_characteristic = mesh.euler_characteristic();
        return r;
    }

    let mut on_faces = vec![false; mesh.half_edges.len()];
    let mut reached = 0;
    for f in mesh.face_ids() {
        let cyc = mesh.face_halfedges(f);
        let closed = mesh.half_edge(*cyc.last().expect("non-empty")).map(|h| h.next) == Some(cyc[0]);
        if !closed {
            r.cycle_errors.push(format!("{f}: boundary cycle does not close"));
        } else if cyc.len() < 3 {
            r.cycle_errors.push(format!("{f}: cycle length {}", cyc.len()));
        }
        if cyc.iter().any(|&h| mesh.half_edge(h).and_then(|x| x.face) != Some(f)) {
            r.cycle_errors.push(format!("{f}: cycle visits other faces"));
        }
        let corners: BTreeSet<VertexId> = cyc.iter().filter_map(|&h| mesh.half_edge(h).map(|x| x.origin)).collect();
        if corners.len() != cyc.len() {
            r.manifold_errors.push(format!("{f}: repeated corner"));
        }
        for h in cyc {
            if !std::mem::replace(&mut on_faces[h.index()], true) {
                reached += 1;
            }
        }
        if let Some(p) = mesh.planarity_residual(f) {
            r.planarity.insert(f, p);
        }
    }
    let faced = mesh.half_edge_ids().filter(|&h| mesh.half_edge(h).and_then(|x| x.face).is_some()).count();
    if faced != reached {
        r.cycle_errors.push(format!("{} half-edges are not reachable from their face", faced - reached));
    }

    let mut origin_count = vec![0usize; mesh.vertices.len()];
    for h in mesh.half_edge_ids() {
        origin_count[mesh.half_edge(h).expect("live").origin.index()] += 1;
    }
    for v in mesh.vertex_ids() {
        let count = origin_count[v.index()];
        match mesh.vertex(v).and_then(|x| x.outgoing) {
            None => r.manifold_errors.push(format!("{v} is isolated")),
            Some(h) if mesh.half_edge(h).map(|x| x.origin) != Some(v) => r.manifold_errors.push(format!("{v}: outgoing half-edge starts elsewhere")),
            Some(_) => {
                let fan = mesh.outgoing(v).len();
                if fan != count {
                    r.manifold_errors.push(format!("{v}: umbrella has {fan} of {count} half-edges"));
                }
                if count < 2 {
                    r.manifold_errors.push(format!("{v} has valence {count}"));
                }
            }
        }
    }

    // Union of vertices joined by an edge; one root per component.
    let mut parent: Vec<usize> = (0..mesh.vertices.len()).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for h in mesh.half_edge_ids() {
        let he = mesh.half_edge(h).expect("live");
        if let Some(t) = mesh.half_edge(he.twin) {
            let (x, y) = (root(&mut parent, he.origin.index()), root(&mut parent, t.origin.index()));
            parent[x] = y;
        }
    }
    r.components = mesh.vertex_ids().filter(|v| root(&mut parent, v.index()) == v.index()).count();
    r.closed = !boundary;
    r.euler_characteristic = mesh.euler_characteristic();
    r
}

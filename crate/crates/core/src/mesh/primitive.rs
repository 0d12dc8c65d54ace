//! Predefined voxels.
//!
//! Every primitive is centered on the center of its bounding box, with `y` up.
//! Canonical vertex order (signs are of `±dim/2`):
//!
//! * cuboid `[w, h, d]`: 0 `(-,-,-)`, 1 `(+,-,-)`, 2 `(+,+,-)`, 3 `(-,+,-)`,
//!   4 `(-,-,+)`, 5 `(+,-,+)`, 6 `(+,+,+)`, 7 `(-,+,+)`.
//! * wedge `[w, h, d, ridge]`: base 0 `(-w,-h,-d)`, 1 `(+w,-h,-d)`, 2 `(+w,-h,+d)`,
//!   3 `(-w,-h,+d)`; ridge 4 `(-ridge,+h,0)`, 5 `(+ridge,+h,0)`.
//! * pyramid `[w, h, d]`: base 0..3 as the wedge base, apex 4 `(0,+h,0)`.
//! * frustum `[w_bottom, h, d_bottom, w_top, d_top]`: bottom 0..3 as the wedge
//!   base, top 4 `(-w_top,+h,-d_top)`, 5 `(+w_top,+h,-d_top)`, 6 `(+w_top,+h,+d_top)`,
//!   7 `(-w_top,+h,+d_top)`.
//!
//! Local coordinates are linear in the dimensions, so each coordinate is stored
//! as `coefficient * dims[index]`.

use super::{MeshError, Result};
use nalgebra::{DMatrix, Point3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Cuboid,
    Wedge,
    Pyramid,
    Frustum,
}

impl PrimitiveKind {
    pub fn num_dims(self) -> usize {
        match self {
            PrimitiveKind::Cuboid | PrimitiveKind::Pyramid => 3,
            PrimitiveKind::Wedge => 4,
            PrimitiveKind::Frustum => 5,
        }
    }

    pub fn num_vertices(self) -> usize {
        match self {
            PrimitiveKind::Cuboid | PrimitiveKind::Frustum => 8,
            PrimitiveKind::Wedge => 6,
            PrimitiveKind::Pyramid => 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub kind: PrimitiveKind,
    pub dims: Vec<f64>,
}

impl PrimitiveSpec {
    pub fn new(kind: PrimitiveKind, dims: Vec<f64>) -> Self {
        Self { kind, dims }
    }

    pub fn cuboid(w: f64, h: f64, d: f64) -> Self {
        Self::new(PrimitiveKind::Cuboid, vec![w, h, d])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() != self.kind.num_dims() {
            return Err(MeshError::InvalidPrimitive(format!(
                "{:?} takes {} dimensions, got {}",
                self.kind,
                self.kind.num_dims(),
                self.dims.len()
            )));
        }
        if let Some(d) = self.dims.iter().find(|d| !(d.is_finite() && **d > 0.0)) {
            return Err(MeshError::InvalidPrimitive(format!("dimension {d} is not strictly positive")));
        }
        Ok(())
    }

    pub fn template(&self) -> Result<PrimitiveTemplate> {
        self.validate()?;
        Ok(PrimitiveTemplate::of(self.kind))
    }
}

/// One local coordinate axis: `coef * dims[dim]`, or zero when `dim` is `None`.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Term {
    dim: Option<usize>,
    coef: f64,
}

const fn t(dim: usize, coef: f64) -> Term {
    Term { dim: Some(dim), coef }
}

const Z: Term = Term { dim: None, coef: 0.0 };

/// Canonical corner table and faces (outward, counter-clockwise) of a kind.
#[derive(Clone, Debug)]
pub struct PrimitiveTemplate {
    pub kind: PrimitiveKind,
    corners: Vec<[Term; 3]>,
    pub faces: Vec<Vec<usize>>,
}

impl PrimitiveTemplate {
    pub fn of(kind: PrimitiveKind) -> Self {
        const P: f64 = 0.5;
        const M: f64 = -0.5;
        let base = |w: usize, h: usize, d: usize| {
            vec![[t(w, M), t(h, M), t(d, M)], [t(w, P), t(h, M), t(d, M)], [t(w, P), t(h, M), t(d, P)], [t(w, M), t(h, M), t(d, P)]]
        };
        let (corners, faces): (Vec<[Term; 3]>, Vec<Vec<usize>>) = match kind {
            PrimitiveKind::Cuboid => (
                vec![
                    [t(0, M), t(1, M), t(2, M)],
                    [t(0, P), t(1, M), t(2, M)],
                    [t(0, P), t(1, P), t(2, M)],
                    [t(0, M), t(1, P), t(2, M)],
                    [t(0, M), t(1, M), t(2, P)],
                    [t(0, P), t(1, M), t(2, P)],
                    [t(0, P), t(1, P), t(2, P)],
                    [t(0, M), t(1, P), t(2, P)],
                ],
                vec![vec![0, 3, 2, 1], vec![4, 5, 6, 7], vec![0, 1, 5, 4], vec![3, 7, 6, 2], vec![0, 4, 7, 3], vec![1, 2, 6, 5]],
            ),
            PrimitiveKind::Wedge => {
                let mut c = base(0, 1, 2);
                c.push([t(3, M), t(1, P), Z]);
                c.push([t(3, P), t(1, P), Z]);
                (c, vec![vec![0, 1, 2, 3], vec![0, 4, 5, 1], vec![3, 2, 5, 4], vec![0, 3, 4], vec![1, 5, 2]])
            }
            PrimitiveKind::Pyramid => {
                let mut c = base(0, 1, 2);
                c.push([Z, t(1, P), Z]);
                (c, vec![vec![0, 1, 2, 3], vec![0, 4, 1], vec![1, 4, 2], vec![2, 4, 3], vec![3, 4, 0]])
            }
            PrimitiveKind::Frustum => {
                let mut c = base(0, 1, 2);
                c.push([t(3, M), t(1, P), t(4, M)]);
                c.push([t(3, P), t(1, P), t(4, M)]);
                c.push([t(3, P), t(1, P), t(4, P)]);
                c.push([t(3, M), t(1, P), t(4, P)]);
                (
                    c,
                    vec![vec![0, 1, 2, 3], vec![4, 7, 6, 5], vec![0, 4, 5, 1], vec![1, 5, 6, 2], vec![2, 6, 7, 3], vec![3, 7, 4, 0]],
                )
            }
        };
        let mut template = Self { kind, corners, faces };
        template.orient_outward();
        template
    }

    pub fn num_vertices(&self) -> usize {
        self.corners.len()
    }

    pub fn local_position(&self, index: usize, dims: &[f64]) -> Point3<f64> {
        let c = &self.corners[index];
        let eval = |term: &Term| term.dim.map_or(0.0, |d| term.coef * dims[d]);
        Point3::new(eval(&c[0]), eval(&c[1]), eval(&c[2]))
    }

    pub fn local_positions(&self, dims: &[f64]) -> Vec<Point3<f64>> {
        (0..self.corners.len()).map(|i| self.local_position(i, dims)).collect()
    }

    /// Derivative of a corner's local position with respect to the dimensions (3 x n_dims).
    pub fn local_jacobian(&self, index: usize) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(3, self.kind.num_dims());
        for (axis, term) in self.corners[index].iter().enumerate() {
            if let Some(d) = term.dim {
                j[(axis, d)] = term.coef;
            }
        }
        j
    }

    /// Canonical edges, each listed once as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self
            .faces
            .iter()
            .flat_map(|f| (0..f.len()).map(move |i| (f[i].min(f[(i + 1) % f.len()]), f[i].max(f[(i + 1) % f.len()]))))
            .collect();
        out.sort();
        out.dedup();
        out
    }

    /// Edges parallel to local axis `axis` for every choice of dimensions.
    pub fn axis_edges(&self, axis: usize) -> Vec<(usize, usize)> {
        self.edges()
            .into_iter()
            .filter(|&(i, j)| (0..3).filter(|&k| k != axis).all(|k| self.corners[i][k] == self.corners[j][k]) && self.corners[i][axis] != self.corners[j][axis])
            .collect()
    }

    fn orient_outward(&mut self) {
        // Distinct generic dims keep every face non-degenerate.
        let dims = [1.3, 1.7, 2.3, 0.7, 1.1];
        let pts = self.local_positions(&dims[..self.kind.num_dims()]);
        let center = pts.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / pts.len() as f64;
        for face in &mut self.faces {
            let fp: Vec<Point3<f64>> = face.iter().map(|&i| pts[i]).collect();
            let n = super::newell_normal(&fp).expect("non-degenerate face");
            let c = fp.iter().fold(Vector3::zeros(), |a, p| a + p.coords) / fp.len() as f64;
            if n.dot(&(c - center)) < 0.0 {
                face.reverse();
                face.rotate_right(1);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::k_create;

    const KINDS: [(PrimitiveKind, &[f64]); 4] = [
        (PrimitiveKind::Cuboid, &[1.0, 2.0, 3.0]),
        (PrimitiveKind::Wedge, &[2.0, 1.0, 1.0, 1.0]),
        (PrimitiveKind::Pyramid, &[1.0, 1.0, 1.0]),
        (PrimitiveKind::Frustum, &[2.0, 1.0, 2.0, 1.0, 0.5]),
    ];

    #[test]
    fn every_kind_is_closed_planar_and_outward() {
        for (kind, dims) in KINDS {
            let mesh = k_create(&PrimitiveSpec::new(kind, dims.to_vec())).unwrap();
            let report = mesh.validate();
            assert!(report.is_valid(), "{kind:?}: {report:?}");
            assert_eq!(report.euler_characteristic, 2);
            assert_eq!(mesh.num_vertices(), kind.num_vertices());
            for f in mesh.face_ids() {
                assert!(mesh.planarity_residual(f).unwrap() < 1e-12, "{kind:?} {f}");
                let n = mesh.face_normal(f).unwrap();
                let c = mesh.face_centroid(f).unwrap();
                assert!(n.dot(&c.coords) > 0.0, "{kind:?} {f} faces inward");
            }
        }
    }

    #[test]
    fn wedge_faces_fit_planes() {
        // Independent check: each face's corners satisfy the plane through its first three corners.
        let mesh = k_create(&PrimitiveSpec::new(PrimitiveKind::Wedge, vec![2.0, 1.0, 1.0, 1.0])).unwrap();
        assert_eq!(mesh.num_faces(), 5);
        for f in mesh.face_ids() {
            let p = mesh.face_positions(f);
            let n = (p[1] - p[0]).cross(&(p[2] - p[0])).normalize();
            for q in &p {
                assert!((q - p[0]).dot(&n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_positive_dims() {
        for dims in [vec![1.0, 0.0, 1.0], vec![1.0, -2.0, 1.0], vec![1.0, 1.0]] {
            assert!(matches!(k_create(&PrimitiveSpec::new(PrimitiveKind::Cuboid, dims)), Err(MeshError::InvalidPrimitive(_))));
        }
    }

    #[test]
    fn cuboid_axis_families_have_four_edges() {
        let t = PrimitiveTemplate::of(PrimitiveKind::Cuboid);
        for axis in 0..3 {
            assert_eq!(t.axis_edges(axis).len(), 4);
        }
        assert_eq!(PrimitiveTemplate::of(PrimitiveKind::Wedge).axis_edges(1).len(), 0);
    }

    #[test]
    fn local_jacobian_matches_linear_form() {
        let t = PrimitiveTemplate::of(PrimitiveKind::Frustum);
        let dims = [2.0, 1.0, 2.0, 1.0, 0.5];
        for i in 0..t.num_vertices() {
            let j = t.local_jacobian(i);
            let p = j * nalgebra::DVector::from_row_slice(&dims);
            assert!((Vector3::new(p[0], p[1], p[2]) - t.local_position(i, &dims).coords).norm() < 1e-15);
        }
    }
}

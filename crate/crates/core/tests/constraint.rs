mod common;

use common::*;
use nalgebra::{Point2, Point3, Vector3};
use pim::constraint::*;
use pim::mesh::{k_create, FaceId, Mesh, PrimitiveSpec, VertexId};
use pim::ImageId;
use proptest::prelude::*;

fn store_with_images(n: u32) -> ConstraintStore {
    let mut s = ConstraintStore::new();
    for i in 0..n {
        s.register_image(ImageId(i), ImageSize { width: 640, height: 480 });
    }
    s
}

#[test]
fn pairs_satisfy_ground_truth_epipolar_relation() {
    let (a, b) = default_pair();
    let mut mesh = Mesh::new();
    mesh.add_primitive(&PrimitiveSpec::cuboid(2.0, 1.0, 1.5), &nalgebra::Isometry3::identity()).unwrap();
    let mut store = store_with_images(2);
    for v in mesh.vertex_ids().collect::<Vec<_>>() {
        let x = mesh.position(v).unwrap();
        store.add_projection(&mesh, v, ImageId(0), a.project(&x), 1.0).unwrap();
        store.add_projection(&mesh, v, ImageId(1), b.project(&x), 1.0).unwrap();
    }
    let f = a.fundamental_to(&b);
    let pairs = store.derive_epipolar_pairs(ImageId(0), ImageId(1));
    assert_eq!(pairs.len(), 8);
    for (m, mp) in pairs {
        let r = Vector3::new(mp.x, mp.y, 1.0).dot(&(f * Vector3::new(m.x, m.y, 1.0)));
        assert!(r.abs() < 1e-6, "{r}");
    }
}

#[test]
fn collinear_residual_against_triangle_geometry() {
    // For three points the centered matrix has σ₁σ₂ = 2·area/√3, so the
    // residual is the triangle's doubled area scaled by 1/(√3 σ₁).
    let mut rng = rng(31);
    for _ in 0..50 {
        let p = random_points(&mut rng, 3, 2.0);
        let area = 0.5 * (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
        let c = (p[0].coords + p[1].coords + p[2].coords) / 3.0;
        let m = nalgebra::Matrix3::from_rows(&[(p[0].coords - c).transpose(), (p[1].coords - c).transpose(), (p[2].coords - c).transpose()]);
        let gram = m.transpose() * m;
        let s1 = gram.symmetric_eigen().eigenvalues.max().sqrt();
        let expected = 2.0 * area / (3f64.sqrt() * s1);
        let got = collinear_residual(&p);
        assert!((got - expected).abs() < 1e-10 * (1.0 + expected), "{got} vs {expected}");
    }
    let line = [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 2.0, 3.0), Point3::new(-2.0, -4.0, -6.0)];
    assert!(collinear_residual(&line) < 1e-12);
}

#[test]
fn coplanar_residual_grows_with_offset() {
    let base = [Point3::new(0.0, 0.0, 0.0), Point3::new(1.0, 0.0, 0.0), Point3::new(1.0, 1.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
    assert_eq!(coplanar_residual(&base), 0.0);
    let mut last = 0.0;
    for k in 1..=50 {
        let delta = k as f64 * 0.02;
        let mut p = base;
        p[2].z = delta;
        let r = coplanar_residual(&p);
        assert!(r > last, "delta {delta}: {r} !> {last}");
        last = r;
    }
}

#[test]
fn parallel_faces_of_a_cuboid() {
    let mesh = k_create(&PrimitiveSpec::cuboid(1.0, 2.0, 3.0)).unwrap();
    let mut store = store_with_images(0);
    // Opposite faces share no vertex.
    let opposite = mesh
        .face_ids()
        .skip(1)
        .find(|f| mesh.face_vertices(*f).iter().all(|v| !mesh.face_vertices(FaceId(0)).contains(v)))
        .unwrap();
    let id = store.add_spatial(&mesh, SpatialKind::FacesParallel, SpatialRefs::Faces([FaceId(0), opposite])).unwrap();
    assert!(spatial_residual(&mesh, store.spatial(id).unwrap()).unwrap() < 1e-15);
}

#[test]
fn bound_cuboid_with_six_projections_per_image_not_flagged() {
    let mesh = k_create(&PrimitiveSpec::cuboid(1.0, 1.0, 1.0)).unwrap();
    let mut store = store_with_images(2);
    let members: Vec<VertexId> = mesh.vertex_ids().collect();
    store.bind_voxel(&mesh, PrimitiveSpec::cuboid(1.0, 1.0, 1.0), members.clone()).unwrap();
    for img in 0..2 {
        for v in &members[..6] {
            store.add_projection(&mesh, *v, ImageId(img), Point2::new(100.0, 100.0), 1.0).unwrap();
        }
    }
    let report = store.dof_report(&mesh);
    assert!(report.under_constrained.is_empty());
    assert!(report.equations >= report.free_parameters);
}

#[test]
fn split_vertex_is_free() {
    let mut mesh = k_create(&PrimitiveSpec::cuboid(1.0, 1.0, 1.0)).unwrap();
    let mut store = store_with_images(1);
    let members: Vec<VertexId> = mesh.vertex_ids().collect();
    store.bind_voxel(&mesh, PrimitiveSpec::cuboid(1.0, 1.0, 1.0), members).unwrap();
    let e = mesh.edge_ids().next().unwrap();
    let (m, _) = mesh.e_split(e, 0.5).unwrap();
    assert!(store.binding_of(m).is_none());
    assert_eq!(store.dof_report(&mesh).free_parameters, 9 + 3);
}

#[derive(Clone, Debug)]
enum Action {
    Project(u32, u32, f64, f64),
    Coplanar(usize),
    Collinear(usize),
    Remove(usize),
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        (0u32..8, 0u32..3, 0.0..640.0f64, 0.0..480.0f64).prop_map(|(v, i, x, y)| Action::Project(v, i, x, y)),
        (0usize..6).prop_map(Action::Coplanar),
        (0usize..8).prop_map(Action::Collinear),
        (0usize..100).prop_map(Action::Remove),
    ]
}

proptest! {
    #[test]
    fn add_then_remove_restores_store(actions in proptest::collection::vec(action(), 1..40)) {
        let mesh = k_create(&PrimitiveSpec::cuboid(1.0, 1.0, 1.0)).unwrap();
        let mut store = store_with_images(3);
        for a in actions {
            let before = store.clone();
            let added = match a {
                Action::Project(v, i, x, y) => store.add_projection(&mesh, VertexId(v), ImageId(i), Point2::new(x, y), 1.0).ok(),
                Action::Coplanar(f) => store.add_spatial(&mesh, SpatialKind::Coplanar, SpatialRefs::Vertices(mesh.face_vertices(FaceId(f as u32)))).ok(),
                Action::Collinear(k) => store.add_spatial(&mesh, SpatialKind::Collinear, SpatialRefs::Vertices(vec![VertexId(k as u32), VertexId(((k + 1) % 8) as u32), VertexId(((k + 2) % 8) as u32)])).ok(),
                Action::Remove(k) => {
                    let ids: Vec<ConstraintId> = store.projections().map(|c| c.id).chain(store.spatials().map(|c| c.id)).collect();
                    if !ids.is_empty() {
                        let id = ids[k % ids.len()];
                        let mut probe = store.clone();
                        if let Some(p) = probe.projection(id).cloned() {
                            probe.remove_projection(id).unwrap();
                            probe.restore_projection(&mesh, p).unwrap();
                        } else {
                            let s = probe.spatial(id).cloned().unwrap();
                            probe.remove_spatial(id).unwrap();
                            probe.restore_spatial(&mesh, s).unwrap();
                        }
                        prop_assert_eq!(&probe, &store);
                    }
                    None
                }
            };
            if let Some(id) = added {
                let mut undone = store.clone();
                if undone.projection(id).is_some() {
                    undone.remove_projection(id).unwrap();
                } else {
                    undone.remove_spatial(id).unwrap();
                }
                undone.restore_watermark(before.watermark());
                prop_assert_eq!(&undone, &before);
            }
        }
    }

    #[test]
    fn epipolar_pairs_are_symmetric(shared in proptest::collection::btree_set(0u32..8, 0..8), extra in proptest::collection::btree_set(0u32..8, 0..8)) {
        let mesh = k_create(&PrimitiveSpec::cuboid(1.0, 1.0, 1.0)).unwrap();
        let mut store = store_with_images(2);
        for v in &shared {
            store.add_projection(&mesh, VertexId(*v), ImageId(0), Point2::new(*v as f64, 1.0), 1.0).unwrap();
            store.add_projection(&mesh, VertexId(*v), ImageId(1), Point2::new(2.0, *v as f64), 1.0).unwrap();
        }
        for v in extra.difference(&shared) {
            store.add_projection(&mesh, VertexId(*v), ImageId(1), Point2::new(5.0, 5.0), 1.0).unwrap();
        }
        let ab = store.derive_epipolar_pairs(ImageId(0), ImageId(1));
        let ba: Vec<_> = store.derive_epipolar_pairs(ImageId(1), ImageId(0)).into_iter().map(|(x, y)| (y, x)).collect();
        prop_assert_eq!(ab.len(), shared.len());
        prop_assert_eq!(ab, ba);
    }
}

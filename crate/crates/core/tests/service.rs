use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pim::demo;
use pim::service::{router, AppState, Created, ErrorBody, EventKind, EventsResponse, OpApplied, ServiceConfig, StateResponse, Undone, Uploaded};
use pim::session::{Op, Pose, Session};
use pim::constraint::VoxelId;
use pim::{PrimitiveSpec, VertexId};
use serde::de::DeserializeOwned;
use tower::ServiceExt;

fn app() -> Router {
    router(AppState::new(ServiceConfig::default()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json<T: DeserializeOwned>(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, T) {
    let (status, bytes) = call(app, method, uri, body).await;
    let value = serde_json::from_slice(&bytes).unwrap_or_else(|e| panic!("{method} {uri} -> {status}: {e}: {}", String::from_utf8_lossy(&bytes)));
    (status, value)
}

async fn create(app: &Router) -> String {
    let (status, c): (_, Created) = json(app, "POST", "/sessions", vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(c.revision, 0);
    c.id
}

fn body(op: &Op) -> Vec<u8> {
    serde_json::to_vec(op).unwrap()
}

fn cube() -> Op {
    Op::KCreate { spec: PrimitiveSpec::cuboid(1.0, 1.0, 1.0), pose: Pose::default() }
}

fn shift(x: f64, y: f64, z: f64) -> Op {
    Op::SetVoxelPose { voxel: VoxelId(0), rotation: None, translation: Some(nalgebra::Vector3::new(x, y, z)), dims: None }
}

async fn state(app: &Router, id: &str) -> StateResponse {
    let (status, s) = json(app, "GET", &format!("/sessions/{id}/state"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    s
}

#[tokio::test]
async fn k_create_returns_revision_one_and_eight_vertices() {
    let app = app();
    let id = create(&app).await;
    let wire = br#"{"op":"k_create","spec":{"kind":"cuboid","dims":[1,1,1]}}"#.to_vec();
    let (status, a): (_, OpApplied) = json(&app, "POST", &format!("/sessions/{id}/ops"), wire).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(a.revision, 1);
    assert_eq!(a.seq, 0);
    assert_eq!(a.changes.added_vertices.len(), 8);
    assert_eq!(a.changes.added_faces.len(), 6);
}

#[tokio::test]
async fn dangling_vertex_is_a_conflict() {
    let app = app();
    let id = create(&app).await;
    json::<OpApplied>(&app, "POST", &format!("/sessions/{id}/ops"), body(&cube())).await;
    let op = Op::NudgeVertex { vertex: VertexId(99), position: nalgebra::Point3::origin() };
    let (status, e): (_, ErrorBody) = json(&app, "POST", &format!("/sessions/{id}/ops"), body(&op)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(e.kind, "NotFound");
    assert!(e.message.contains("v99"), "{}", e.message);
    assert_eq!(state(&app, &id).await.revision, 1);
}

#[tokio::test]
async fn error_statuses() {
    let app = app();
    let (status, e): (_, ErrorBody) = json(&app, "GET", "/sessions/nope/state", vec![]).await;
    assert_eq!((status, e.kind.as_str()), (StatusCode::NOT_FOUND, "UnknownSession"));
    let id = create(&app).await;
    let (status, e): (_, ErrorBody) = json(&app, "POST", &format!("/sessions/{id}/ops"), b"{\"op\":\"fly\"}".to_vec()).await;
    assert_eq!((status, e.kind.as_str()), (StatusCode::UNPROCESSABLE_ENTITY, "Malformed"));
    let (status, _): (_, ErrorBody) = json(&app, "POST", &format!("/sessions/{id}/ops"), b"not json".to_vec()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, e): (_, ErrorBody) = json(&app, "POST", &format!("/sessions/{id}/undo"), vec![]).await;
    assert_eq!((status, e.kind.as_str()), (StatusCode::CONFLICT, "NothingToUndo"));
    let (status, _): (_, ErrorBody) = json(&app, "GET", &format!("/sessions/{id}/state?since=5"), vec![]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _): (_, ErrorBody) = json(&app, "POST", &format!("/sessions/{id}/images"), b"garbage".to_vec()).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn records_with_wrong_seq_are_rejected() {
    let app = app();
    let id = create(&app).await;
    let record = serde_json::json!({ "seq": 3, "op": cube() });
    let (status, e): (_, ErrorBody) = json(&app, "POST", &format!("/sessions/{id}/ops"), serde_json::to_vec(&record).unwrap()).await;
    assert_eq!((status, e.kind.as_str()), (StatusCode::CONFLICT, "SeqMismatch"));
    let record = serde_json::json!({ "seq": 0, "op": cube() });
    let (status, _): (_, OpApplied) = json(&app, "POST", &format!("/sessions/{id}/ops"), serde_json::to_vec(&record).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn http_replay_equals_direct_replay() {
    let scene = demo::pavilion();
    let direct = scene.run().unwrap();
    let app = app();
    let id = create(&app).await;
    let mut last = 0;
    for record in direct.journal() {
        let (status, a): (_, OpApplied) = json(&app, "POST", &format!("/sessions/{id}/ops"), serde_json::to_vec(record).unwrap()).await;
        assert_eq!(status, StatusCode::OK, "record {}", record.seq);
        assert_eq!(a.revision, last + 1);
        last = a.revision;
    }
    let s = state(&app, &id).await;
    assert_eq!(s.digest, direct.state_digest());
    assert_eq!(Session::replay(direct.journal()).unwrap().state_digest(), s.digest);
    assert_eq!(serde_json::to_string(&s.model.unwrap()).unwrap(), serde_json::to_string(direct.model()).unwrap());
    assert!(s.report.solve.is_some());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_get_gapless_revisions() {
    let app = app();
    let id = create(&app).await;
    json::<OpApplied>(&app, "POST", &format!("/sessions/{id}/ops"), body(&cube())).await;
    let mut tasks = Vec::new();
    for i in 0..24 {
        let app = app.clone();
        let uri = format!("/sessions/{id}/ops");
        let op = shift(i as f64, 0.0, 0.0);
        tasks.push(tokio::spawn(async move { json::<OpApplied>(&app, "POST", &uri, body(&op)).await }));
    }
    let mut revisions = Vec::new();
    for t in tasks {
        let (status, a) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert_eq!(a.revision, a.seq + 1);
        revisions.push(a.revision);
    }
    revisions.sort();
    assert_eq!(revisions, (2..=25).collect::<Vec<_>>());
    assert_eq!(state(&app, &id).await.journal_len, 25);
}

#[tokio::test]
async fn reads_never_bump_the_revision() {
    let app = app();
    let id = create(&app).await;
    json::<OpApplied>(&app, "POST", &format!("/sessions/{id}/ops"), body(&cube())).await;
    let before = state(&app, &id).await;
    for _ in 0..20 {
        for path in ["state", "state?since=0", "report", "mesh.obj", "events?timeout_ms=0", "atlas.png"] {
            call(&app, "GET", &format!("/sessions/{id}/{path}"), vec![]).await;
        }
    }
    let after = state(&app, &id).await;
    assert_eq!(after.revision, before.revision);
    assert_eq!(after.digest, before.digest);
}

#[tokio::test]
async fn undo_bumps_the_revision_and_restores_state() {
    let app = app();
    let id = create(&app).await;
    let empty = state(&app, &id).await.digest;
    json::<OpApplied>(&app, "POST", &format!("/sessions/{id}/ops"), body(&cube())).await;
    let (status, u): (_, Undone) = json(&app, "POST", &format!("/sessions/{id}/undo"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((u.revision, u.seq, u.op.name()), (2, 0, "k_create"));
    assert_eq!(u.changes.removed_vertices.len(), 8);
    let s = state(&app, &id).await;
    assert_eq!(s.digest, empty);
    assert_eq!(s.revision, 2);
}

#[tokio::test]
async fn delta_lists_what_changed_since_a_revision() {
    let app = app();
    let id = create(&app).await;
    json::<OpApplied>(&app, "POST", &format!("/sessions/{id}/ops"), body(&cube())).await;
    let v5 = state(&app, &id).await.model.unwrap().mesh.position(VertexId(5)).unwrap();
    json::<OpApplied>(&app, "POST", &format!("/sessions/{id}/ops"), body(&shift(2.0, 3.0, 4.0))).await;
    let (_, s): (_, StateResponse) = json(&app, "GET", &format!("/sessions/{id}/state?since=1"), vec![]).await;
    assert!(s.model.is_none());
    let d = s.delta.unwrap();
    assert_eq!(d.since, 1);
    assert_eq!(d.changes.moved_vertices.len(), 8);
    assert_eq!(d.vertices[&VertexId(5)], v5 + nalgebra::Vector3::new(2.0, 3.0, 4.0));
    assert!(d.faces.is_empty());
    let (_, s): (_, StateResponse) = json(&app, "GET", &format!("/sessions/{id}/state?since=0"), vec![]).await;
    let d = s.delta.unwrap();
    assert_eq!(d.vertices.len(), 8);
    assert_eq!(d.faces.len(), 6);
    let (_, s): (_, StateResponse) = json(&app, "GET", &format!("/sessions/{id}/state?since=2"), vec![]).await;
    assert!(s.delta.unwrap().vertices.is_empty());
}

#[tokio::test]
async fn uploads_are_stored_by_hash_and_deduplicated() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(AppState::new(ServiceConfig { data_dir: Some(dir.path().to_path_buf()) }));
    let id = create(&app).await;
    let scene = demo::cuboid_two_view();
    let uri = format!("/sessions/{id}/images?name=front.png");
    let (status, u): (_, Uploaded) = json(&app, "POST", &uri, scene.images[0].clone()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((u.image.0, u.width, u.height, u.revision, u.duplicate), (0, demo::WIDTH, demo::HEIGHT, 1, false));
    assert!(dir.path().join(&id).join(format!("images/{}.png", u.sha256)).exists());
    let (_, again): (_, Uploaded) = json(&app, "POST", &uri, scene.images[0].clone()).await;
    assert_eq!((again.image, again.revision, again.duplicate), (u.image, 1, true));
}

#[tokio::test]
async fn events_long_poll() {
    let app = app();
    let id = create(&app).await;
    let (_, e): (_, EventsResponse) = json(&app, "GET", &format!("/sessions/{id}/events?timeout_ms=10"), vec![]).await;
    assert!(e.events.is_empty());
    assert_eq!(e.cursor, 0);

    let waiter = {
        let app = app.clone();
        let uri = format!("/sessions/{id}/events?cursor=0&timeout_ms=10000");
        tokio::spawn(async move { json::<EventsResponse>(&app, "GET", &uri, vec![]).await })
    };
    tokio::time::sleep(std::time::Duration::from_millis(50)).await;
    json::<OpApplied>(&app, "POST", &format!("/sessions/{id}/ops"), body(&cube())).await;
    let (_, e) = waiter.await.unwrap();
    assert_eq!(e.events.len(), 1);
    assert_eq!((e.events[0].revision, e.events[0].kind), (1, EventKind::Ops));
    assert_eq!(e.cursor, 1);
}

#[tokio::test]
async fn studio_flow_calibrates_solves_and_textures() {
    let scene = demo::cuboid_two_view();
    let app = app();
    let id = create(&app).await;
    for bytes in &scene.images {
        json::<Uploaded>(&app, "POST", &format!("/sessions/{id}/images?name=photo.png"), bytes.clone()).await;
    }
    let mut kinds = Vec::new();
    for op in scene.ops.iter().filter(|op| !matches!(op, Op::AddImage { .. })) {
        let (status, _): (_, OpApplied) = json(&app, "POST", &format!("/sessions/{id}/ops"), body(op)).await;
        assert_eq!(status, StatusCode::OK);
    }
    let s = state(&app, &id).await;
    assert_eq!(s.digest, scene.run().unwrap().state_digest());

    let (status, png) = call(&app, "GET", &format!("/sessions/{id}/atlas.png"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(&png[1..4], b"PNG");
    let (_, e): (_, EventsResponse) = json(&app, "GET", &format!("/sessions/{id}/events?timeout_ms=0"), vec![]).await;
    kinds.extend(e.events.iter().map(|e| e.kind));
    assert!(kinds.contains(&EventKind::Calibration));
    assert!(kinds.contains(&EventKind::Solve));
    assert_eq!(kinds.last(), Some(&EventKind::Texture));

    let (status, obj) = call(&app, "GET", &format!("/sessions/{id}/mesh.obj"), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    let obj = String::from_utf8(obj).unwrap();
    assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), 8);
    assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), 6);
}

//! HTTP API over sessions.
//!
//! Each session carries a revision that increases by one on every state
//! change. Mutations of one session run one at a time in arrival order; reads
//! never touch the revision. Bodies are JSON except image uploads (raw bytes)
//! and the exports.

use crate::mesh::write_obj;
use crate::session::{parse_op_input, ChangeSet, Op, Session, SessionError, SessionReport};
use crate::{Camera, FaceId, ImageId, VertexId};
use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nalgebra::Point3;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

pub const DEFAULT_PORT: u16 = 8470;
pub const DEFAULT_BIND: &str = "127.0.0.1";
const MAX_POLL: Duration = Duration::from_secs(60);
const DEFAULT_POLL: Duration = Duration::from_secs(25);

#[derive(Clone, Debug, Default)]
pub struct ServiceConfig {
    /// Directory under which each session stores uploaded images. Without
    /// one, images are kept in memory only.
    pub data_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Ops,
    Solve,
    Calibration,
    Texture,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub revision: u64,
    pub kind: EventKind,
}

struct Slot {
    session: Session,
    /// `changes[r - 1]` took the session from revision `r - 1` to `r`.
    changes: Vec<ChangeSet>,
    events: Vec<Event>,
}

impl Slot {
    fn revision(&self) -> u64 {
        self.changes.len() as u64
    }

    fn commit(&mut self, changes: ChangeSet) -> u64 {
        let calibrated = changes.calibrated;
        let solved = changes.solved;
        self.changes.push(changes);
        let revision = self.revision();
        self.events.push(Event { revision, kind: EventKind::Ops });
        if calibrated {
            self.events.push(Event { revision, kind: EventKind::Calibration });
        }
        if solved {
            self.events.push(Event { revision, kind: EventKind::Solve });
        }
        revision
    }
}

struct ApiSession {
    slot: Arc<tokio::sync::Mutex<Slot>>,
    /// Number of events logged so far.
    events: tokio::sync::watch::Sender<usize>,
}

struct Registry {
    config: ServiceConfig,
    sessions: Mutex<HashMap<String, Arc<ApiSession>>>,
    next_id: Mutex<u64>,
}

#[derive(Clone)]
pub struct AppState(Arc<Registry>);

impl AppState {
    pub fn new(config: ServiceConfig) -> Self {
        AppState(Arc::new(Registry { config, sessions: Mutex::new(HashMap::new()), next_id: Mutex::new(1) }))
    }

    /// Registers an existing session (a loaded project, say) and returns its id.
    pub fn insert(&self, session: Session) -> String {
        let id = {
            let mut n = self.0.next_id.lock().expect("registry lock");
            let id = format!("s{n}");
            *n += 1;
            id
        };
        let slot = Slot { session, changes: Vec::new(), events: Vec::new() };
        let api = ApiSession { slot: Arc::new(tokio::sync::Mutex::new(slot)), events: tokio::sync::watch::channel(0).0 };
        self.0.sessions.lock().expect("registry lock").insert(id.clone(), Arc::new(api));
        id
    }

    fn get(&self, id: &str) -> Result<Arc<ApiSession>, ApiError> {
        self.0.sessions.lock().expect("registry lock").get(id).cloned().ok_or_else(|| ApiError::unknown_session(id))
    }

    fn session_dir(&self, id: &str) -> Option<PathBuf> {
        self.0.config.data_dir.as_ref().map(|d| d.join(id))
    }
}

/// Error body: `{kind, message}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: String,
    pub message: String,
}

#[derive(Serialize, Deserialize)]
pub struct ErrorBody {
    pub kind: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, kind: impl Into<String>, message: impl Into<String>) -> Self {
        ApiError { status, kind: kind.into(), message: message.into() }
    }

    fn unknown_session(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "UnknownSession", format!("no session {id}"))
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::Malformed(_) | SessionError::Image(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::CONFLICT,
        };
        ApiError::new(status, e.kind(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { kind: self.kind, message: self.message })).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs `f` on the session's state after every earlier mutation has finished.
async fn mutate<T: Send + 'static>(api: &ApiSession, f: impl FnOnce(&mut Slot) -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    let mut guard = api.slot.clone().lock_owned().await;
    let (out, logged) = tokio::task::spawn_blocking(move || {
        let out = f(&mut guard);
        (out, guard.events.len())
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string()))?;
    api.events.send_replace(logged);
    out
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/images", post(upload_image))
        .route("/sessions/{id}/ops", post(apply_op))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/state", get(get_state))
        .route("/sessions/{id}/mesh.obj", get(get_obj))
        .route("/sessions/{id}/atlas.png", get(get_atlas))
        .route("/sessions/{id}/report", get(get_report))
        .route("/sessions/{id}/events", get(get_events))
        .with_state(state)
}

/// Serves on a bound listener until the process ends.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

#[derive(Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub revision: u64,
}

async fn create_session(State(state): State<AppState>) -> ApiResult<Json<Created>> {
    let id = state.insert(Session::new());
    if let Some(dir) = state.session_dir(&id) {
        std::fs::create_dir_all(&dir).map_err(SessionError::from)?;
        let api = state.get(&id)?;
        api.slot.lock().await.session.set_root(dir);
    }
    Ok(Json(Created { id, revision: 0 }))
}

#[derive(Deserialize)]
struct UploadQuery {
    name: Option<String>,
}

#[derive(Serialize, Deserialize)]
pub struct Uploaded {
    pub revision: u64,
    pub image: ImageId,
    pub width: u32,
    pub height: u32,
    pub sha256: String,
    /// The same bytes were uploaded before; nothing changed.
    pub duplicate: bool,
}

async fn upload_image(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<UploadQuery>, body: Bytes) -> ApiResult<Json<Uploaded>> {
    let api = state.get(&id)?;
    let name = q.name.unwrap_or_else(|| "upload.png".into());
    let out = mutate(&api, move |slot| {
        let (image, applied) = slot.session.add_image_bytes(&name, &body)?;
        let duplicate = applied.is_none();
        let revision = match applied {
            Some(a) => slot.commit(a.changes),
            None => slot.revision(),
        };
        let e = &slot.session.model().images[&image];
        Ok(Uploaded { revision, image, width: e.width, height: e.height, sha256: e.sha256.clone(), duplicate })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Serialize, Deserialize)]
pub struct OpApplied {
    pub revision: u64,
    pub seq: u64,
    pub changes: ChangeSet,
}

async fn apply_op(State(state): State<AppState>, Path(id): Path<String>, body: Bytes) -> ApiResult<Json<OpApplied>> {
    let api = state.get(&id)?;
    let (seq, op) = parse_op_input(&body)?;
    let out = mutate(&api, move |slot| {
        let next = slot.session.journal().len() as u64;
        if let Some(seq) = seq.filter(|s| *s != next) {
            return Err(ApiError::new(StatusCode::CONFLICT, "SeqMismatch", format!("record seq {seq}, expected {next}")));
        }
        let applied = slot.session.apply(op)?;
        let revision = slot.commit(applied.changes.clone());
        Ok(OpApplied { revision, seq: applied.seq, changes: applied.changes })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Serialize, Deserialize)]
pub struct Undone {
    pub revision: u64,
    /// Sequence number of the record that was reverted.
    pub seq: u64,
    pub op: Op,
    pub changes: ChangeSet,
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Undone>> {
    let api = state.get(&id)?;
    let out = mutate(&api, |slot| {
        let (record, changes) = slot.session.undo()?;
        let revision = slot.commit(changes.clone());
        Ok(Undone { revision, seq: record.seq, op: record.op, changes })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Deserialize)]
struct StateQuery {
    since: Option<u64>,
}

/// Entities touched since a revision, with their current values. Removed
/// ids are listed in `changes`.
#[derive(Serialize, Deserialize)]
pub struct Delta {
    pub since: u64,
    pub changes: ChangeSet,
    pub vertices: BTreeMap<VertexId, Point3<f64>>,
    pub faces: BTreeMap<FaceId, Vec<VertexId>>,
}

#[derive(Serialize, Deserialize)]
pub struct StateResponse {
    pub revision: u64,
    pub journal_len: usize,
    /// Digest of the complete session state; equal digests mean bit-identical state.
    pub digest: String,
    /// Full model; absent in delta responses.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<crate::session::Model>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta: Option<Delta>,
    pub cameras: BTreeMap<ImageId, Camera>,
    pub report: SessionReport,
}

async fn get_state(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<StateQuery>) -> ApiResult<Json<StateResponse>> {
    let api = state.get(&id)?;
    let slot = api.slot.lock().await;
    let revision = slot.revision();
    let s = &slot.session;
    let (model, delta) = match q.since {
        None => (Some(s.model().clone()), None),
        Some(since) if since > revision => {
            return Err(ApiError::new(StatusCode::NOT_FOUND, "UnknownRevision", format!("revision {since} is ahead of {revision}")));
        }
        Some(since) => {
            let mut changes = ChangeSet::default();
            for c in &slot.changes[since as usize..] {
                changes.merge(c);
            }
            let mesh = s.mesh();
            let vertices = changes
                .added_vertices
                .iter()
                .chain(&changes.moved_vertices)
                .filter_map(|v| mesh.position(*v).map(|p| (*v, p)))
                .collect();
            let faces = changes
                .added_faces
                .iter()
                .chain(&changes.changed_faces)
                .filter(|f| mesh.face(**f).is_some())
                .map(|f| (*f, mesh.face_vertices(*f)))
                .collect();
            (None, Some(Delta { since, changes, vertices, faces }))
        }
    };
    Ok(Json(StateResponse {
        revision,
        journal_len: s.journal().len(),
        digest: s.state_digest(),
        model,
        delta,
        cameras: s.cameras().clone(),
        report: s.report(),
    }))
}

async fn get_obj(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let api = state.get(&id)?;
    let slot = api.slot.lock().await;
    let obj = write_obj(slot.session.mesh(), None);
    Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], obj).into_response())
}

/// Builds the texture atlas. Texturing is derived output, so the revision
/// stays put; listeners get a `texture` event at the current revision.
async fn get_atlas(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let api = state.get(&id)?;
    let png = mutate(&api, |slot| {
        let (_, atlas) = slot.session.build_atlas()?;
        let revision = slot.revision();
        slot.events.push(Event { revision, kind: EventKind::Texture });
        Ok(atlas.to_png())
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Serialize, Deserialize)]
pub struct ReportResponse {
    pub revision: u64,
    #[serde(flatten)]
    pub report: SessionReport,
}

async fn get_report(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<ReportResponse>> {
    let api = state.get(&id)?;
    let slot = api.slot.lock().await;
    Ok(Json(ReportResponse { revision: slot.revision(), report: slot.session.report() }))
}

#[derive(Deserialize)]
struct EventsQuery {
    /// Number of events already seen.
    cursor: Option<usize>,
    timeout_ms: Option<u64>,
}

#[derive(Serialize, Deserialize)]
pub struct EventsResponse {
    /// Pass back as `cursor` to receive only later events.
    pub cursor: usize,
    pub revision: u64,
    pub events: Vec<Event>,
}

/// Long poll: answers at once when events past `cursor` exist, otherwise
/// waits for the next one or the timeout.
async fn get_events(State(state): State<AppState>, Path(id): Path<String>, Query(q): Query<EventsQuery>) -> ApiResult<Json<EventsResponse>> {
    let api = state.get(&id)?;
    let cursor = q.cursor.unwrap_or(0);
    let wait = q.timeout_ms.map(Duration::from_millis).unwrap_or(DEFAULT_POLL).min(MAX_POLL);
    let mut rx = api.events.subscribe();
    if *rx.borrow_and_update() <= cursor {
        let _ = tokio::time::timeout(wait, rx.wait_for(|n| *n > cursor)).await;
    }
    let slot = api.slot.lock().await;
    let events = slot.events.get(cursor..).map(<[Event]>::to_vec).unwrap_or_default();
    Ok(Json(EventsResponse { cursor: slot.events.len(), revision: slot.revision(), events }))
}

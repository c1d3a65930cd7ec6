//! HTTP + WebSocket backend for semi-automatic annotation sessions.
//!
//! Every session sits behind its own async mutex: requests touching one
//! session are applied in arrival order and never interleave mid-frame.
//! Processed frames fan out to WebSocket subscribers through a broadcast
//! channel that is only written while the session lock is held, so each
//! subscriber sees frames in processing order.

mod overlay;
mod session;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::{SinkExt, StreamExt};
use handlift_core::io_formats::IoError;
use handlift_core::pipeline::{ManualOverride, OverrideError};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::{broadcast, Mutex};

pub use overlay::{frame_payload, track_color, OverlayMode, UNMATCHED_COLOR};
pub use session::{Mode, Session, SessionConfig, SessionError};

struct SessionHandle {
    session: Mutex<Session>,
    events: broadcast::Sender<Arc<str>>,
}

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Arc<SessionHandle>>>>,
    next_id: Arc<AtomicU64>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads a manifest into a new session and returns its id.
    pub fn create_session(&self, manifest: &std::path::Path, config: SessionConfig) -> Result<String, SessionError> {
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed) + 1);
        let session = Session::open(id.clone(), manifest, config)?;
        let (events, _) = broadcast::channel(1024);
        let handle = Arc::new(SessionHandle {
            session: Mutex::new(session),
            events,
        });
        self.sessions.write().expect("session table poisoned").insert(id.clone(), handle);
        log::info!("session {id} opened on {}", manifest.display());
        Ok(id)
    }

    fn get(&self, id: &str) -> Result<Arc<SessionHandle>, ApiError> {
        self.sessions
            .read()
            .expect("session table poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no session {id:?}")))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/sessions", post(create))
        .route("/v1/sessions/{id}/state", get(status))
        .route("/v1/sessions/{id}/step", post(step))
        .route("/v1/sessions/{id}/run", post(run))
        .route("/v1/sessions/{id}/pause", post(pause))
        .route("/v1/sessions/{id}/params", post(params))
        .route("/v1/sessions/{id}/overlay", post(overlay))
        .route("/v1/sessions/{id}/cameras/{cid}/reject", post(reject))
        .route("/v1/sessions/{id}/override", post(manual_match))
        .route("/v1/sessions/{id}/export", post(export))
        .route("/v1/sessions/{id}/stream", get(stream))
        .with_state(state)
}

/// Serves until the listener fails or the task is dropped.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

// ---------------------------------------------------------------- errors

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::Load(IoError::Validation { .. }) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Load(_) => StatusCode::BAD_REQUEST,
            SessionError::Config(_) => StatusCode::BAD_REQUEST,
            SessionError::Override(OverrideError::Conflict { .. }) => StatusCode::CONFLICT,
            SessionError::Override(OverrideError::WrongFrame { .. }) => StatusCode::BAD_REQUEST,
            SessionError::Override(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::Pipeline(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::UnknownCamera(_) => StatusCode::NOT_FOUND,
            SessionError::Running | SessionError::NothingAnnotated | SessionError::EndOfSequence => StatusCode::CONFLICT,
            SessionError::Export { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let field = match &e {
            SessionError::Config(c) => Some(c.field.clone()),
            _ => None,
        };
        Self {
            status,
            message: e.to_string(),
            field,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = Value::String(f);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ApiError>;

fn ok(v: Value) -> ApiResult {
    Ok(Json(v).into_response())
}

/// Extracts a JSON body, turning rejections into our error shape.
fn body<T: serde::de::DeserializeOwned>(raw: &str) -> Result<T, ApiError> {
    let raw = if raw.trim().is_empty() { "{}" } else { raw };
    serde_json::from_str(raw).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("request body: {e}")))
}

// ---------------------------------------------------------------- handlers

#[derive(Deserialize)]
struct CreateRequest {
    manifest: PathBuf,
    #[serde(default)]
    config: Option<SessionConfig>,
}

async fn create(State(app): State<AppState>, raw: String) -> ApiResult {
    let req: CreateRequest = body(&raw)?;
    let id = app.create_session(&req.manifest, req.config.unwrap_or_default())?;
    let handle = app.get(&id)?;
    let status = handle.session.lock().await.status();
    Ok((StatusCode::CREATED, Json(json!({ "id": id, "state": status }))).into_response())
}

async fn status(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let handle = app.get(&id)?;
    let s = handle.session.lock().await;
    ok(json!({ "state": s.status(), "payload": s.payload() }))
}

#[derive(Deserialize)]
struct StepRequest {
    #[serde(default = "one")]
    n: i64,
}

fn one() -> i64 {
    1
}

/// Forward steps process frames and push them; backward steps restore
/// snapshots without pushing. The response carries the current view.
async fn step(State(app): State<AppState>, Path(id): Path<String>, raw: String) -> ApiResult {
    let req: StepRequest = body(&raw)?;
    let handle = app.get(&id)?;
    let mut s = handle.session.lock().await;
    if s.mode == Mode::Running {
        return Err(SessionError::Running.into());
    }
    s.mode = Mode::Stepping;
    let mut moved = 0i64;
    if req.n >= 0 {
        for _ in 0..req.n {
            match s.step_forward()? {
                Some(p) => {
                    let _ = handle.events.send(Arc::from(p.to_string()));
                    moved += 1;
                }
                None => break,
            }
        }
    } else {
        for _ in 0..req.n.unsigned_abs() {
            if !s.step_back() {
                break;
            }
            moved -= 1;
        }
    }
    ok(json!({ "moved": moved, "state": s.status(), "payload": s.payload() }))
}

async fn run(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let handle = app.get(&id)?;
    {
        let mut s = handle.session.lock().await;
        if s.mode == Mode::Running {
            return Ok((StatusCode::ACCEPTED, Json(json!({ "state": s.status() }))).into_response());
        }
        s.mode = Mode::Running;
    }
    let worker = handle.clone();
    tokio::spawn(async move {
        loop {
            {
                let mut s = worker.session.lock().await;
                if s.mode != Mode::Running {
                    break;
                }
                match s.step_forward() {
                    Ok(Some(p)) => {
                        let _ = worker.events.send(Arc::from(p.to_string()));
                    }
                    Ok(None) => {
                        s.pause();
                        let _ = worker.events.send(Arc::from(
                            json!({ "type": "end_of_sequence", "session": s.id, "cursor": s.cursor() }).to_string(),
                        ));
                        break;
                    }
                    Err(e) => {
                        log::error!("session {}: {e}", s.id);
                        s.pause();
                        let _ = worker
                            .events
                            .send(Arc::from(json!({ "type": "error", "session": s.id, "error": e.to_string() }).to_string()));
                        break;
                    }
                }
            }
            tokio::task::yield_now().await;
        }
    });
    let s = handle.session.lock().await;
    Ok((StatusCode::ACCEPTED, Json(json!({ "state": s.status() }))).into_response())
}

async fn pause(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult {
    let handle = app.get(&id)?;
    let mut s = handle.session.lock().await;
    s.pause();
    ok(json!({ "state": s.status() }))
}

async fn params(State(app): State<AppState>, Path(id): Path<String>, raw: String) -> ApiResult {
    let patch: serde_json::Map<String, Value> = body(&raw)?;
    let handle = app.get(&id)?;
    let mut s = handle.session.lock().await;
    s.set_params(&patch)?;
    ok(json!({ "state": s.status() }))
}

#[derive(Deserialize)]
struct OverlayRequest {
    mode: OverlayMode,
}

async fn overlay(State(app): State<AppState>, Path(id): Path<String>, raw: String) -> ApiResult {
    let req: OverlayRequest = body(&raw)?;
    let handle = app.get(&id)?;
    let mut s = handle.session.lock().await;
    s.set_overlay(req.mode)?;
    ok(json!({ "state": s.status(), "payload": s.payload() }))
}

#[derive(Deserialize)]
struct RejectRequest {
    #[serde(default = "yes")]
    rejected: bool,
}

fn yes() -> bool {
    true
}

async fn reject(State(app): State<AppState>, Path((id, cid)): Path<(String, String)>, raw: String) -> ApiResult {
    let req: RejectRequest = body(&raw)?;
    let handle = app.get(&id)?;
    let mut s = handle.session.lock().await;
    s.reject_camera(&cid, req.rejected)?;
    ok(json!({ "state": s.status() }))
}

async fn manual_match(State(app): State<AppState>, Path(id): Path<String>, raw: String) -> ApiResult {
    let o: ManualOverride = body(&raw)?;
    let handle = app.get(&id)?;
    let mut s = handle.session.lock().await;
    s.manual_match(o)?;
    ok(json!({ "state": s.status() }))
}

#[derive(Deserialize)]
struct ExportRequest {
    path: PathBuf,
}

async fn export(State(app): State<AppState>, Path(id): Path<String>, raw: String) -> ApiResult {
    let req: ExportRequest = body(&raw)?;
    let handle = app.get(&id)?;
    let s = handle.session.lock().await;
    let frames = s.export(&req.path)?;
    ok(json!({ "path": req.path, "frames": frames }))
}

async fn stream(State(app): State<AppState>, Path(id): Path<String>, ws: WebSocketUpgrade) -> ApiResult {
    let handle = app.get(&id)?;
    Ok(ws.on_upgrade(move |socket| subscriber(socket, handle)))
}

async fn subscriber(socket: WebSocket, handle: Arc<SessionHandle>) {
    // subscribe under the lock so the current view and the live feed neither
    // overlap nor leave a gap
    let (mut rx, current) = {
        let s = handle.session.lock().await;
        (handle.events.subscribe(), s.payload())
    };
    let (mut sink, mut incoming) = socket.split();
    if !current.is_null() && sink.send(Message::Text(current.to_string().into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            ev = rx.recv() => match ev {
                Ok(text) => {
                    if sink.send(Message::Text(text.as_ref().into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("subscriber lagged by {n} frames"),
                Err(broadcast::error::RecvError::Closed) => break,
            },
            msg = incoming.next() => match msg {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}

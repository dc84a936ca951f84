//! Axum routes over a shared [`Coordinator`].

use std::collections::VecDeque;
use std::convert::Infallible;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use axum::body::Body;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use statebridge_core::protocol::api::{
    AgentStateUpdate, Confirm, CreateSession, ErrorBody, SessionCreated, SubmitTask,
};
use statebridge_core::protocol::{encode_event, EventKind, StreamEvent};
use statebridge_core::trial::Condition;
use tokio::net::TcpListener;
use tokio::sync::watch;

use crate::coordinator::{CoordError, Coordinator};

pub type Shared = Arc<Mutex<Coordinator>>;

const DEFAULT_WAIT_MS: u64 = 25_000;

pub fn shared(coordinator: Coordinator) -> Shared {
    Arc::new(Mutex::new(coordinator))
}

fn lock(state: &Shared) -> MutexGuard<'_, Coordinator> {
    // a panicking handler leaves the data consistent at event granularity
    state.lock().unwrap_or_else(|e| e.into_inner())
}

pub struct ApiError(CoordError);

impl From<CoordError> for ApiError {
    fn from(e: CoordError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            CoordError::UnknownSession(_) | CoordError::UnknownTask(_) => StatusCode::NOT_FOUND,
            CoordError::SessionBusy(_)
            | CoordError::TaskNotActive(_)
            | CoordError::NoPendingConfirmation(_)
            | CoordError::TaskDeclined => StatusCode::CONFLICT,
            CoordError::AgentUnavailable => StatusCode::SERVICE_UNAVAILABLE,
            CoordError::NoIntent(_) | CoordError::IllegalTransition { .. } | CoordError::InvalidTimestamp { .. } => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            CoordError::BadRequest(_) => StatusCode::BAD_REQUEST,
            CoordError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let body = ErrorBody {
            error: self.0.code().to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/api/v1/health", get(health))
        .route("/api/v1/sessions", post(create_session))
        .route("/api/v1/sessions/{sid}/tasks", post(submit_task))
        .route("/api/v1/sessions/{sid}/stream", get(stream))
        .route("/api/v1/sessions/{sid}/events", get(events))
        .route("/api/v1/sessions/{sid}/trials", get(session_trials))
        .route("/api/v1/trials", get(all_trials))
        .route("/api/v1/tasks/{tid}/confirm", post(confirm))
        .route("/agent/v1/register", post(register))
        .route("/agent/v1/next", get(next_task))
        .route("/agent/v1/tasks/{tid}/state", post(state_update))
        .route("/agent/v1/tasks/{tid}/decision", get(decision))
        .layer(axum::middleware::map_response(allow_any_origin))
        .with_state(state)
}

async fn allow_any_origin(mut response: Response) -> Response {
    response
        .headers_mut()
        .insert(header::ACCESS_CONTROL_ALLOW_ORIGIN, HeaderValue::from_static("*"));
    response
}

/// Binds the router to `listener` and serves until the future is dropped.
/// Spawns the confirmation-timeout sweep when one is configured.
pub async fn serve(listener: TcpListener, state: Shared) -> std::io::Result<()> {
    let timeout = lock(&state).config().confirm_timeout;
    if let Some(timeout) = timeout {
        let sweep = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_millis(100).min(timeout));
            loop {
                tick.tick().await;
                if let Err(e) = lock(&sweep).expire_confirmations(timeout) {
                    tracing::error!("confirmation sweep: {e}");
                }
            }
        });
    }
    axum::serve(listener, router(state)).await
}

async fn health(State(state): State<Shared>) -> Json<serde_json::Value> {
    let agent = lock(&state).agent_status();
    Json(serde_json::json!({
        "status": "ok",
        "agent_registered": agent.registered,
        "agent_faulted": agent.faulted,
    }))
}

async fn create_session(
    State(state): State<Shared>,
    Json(req): Json<CreateSession>,
) -> ApiResult<(StatusCode, Json<SessionCreated>)> {
    let session_id = lock(&state).create_session(req)?;
    Ok((StatusCode::CREATED, Json(SessionCreated { session_id })))
}

async fn submit_task(
    State(state): State<Shared>,
    Path(sid): Path<String>,
    Json(req): Json<SubmitTask>,
) -> ApiResult<impl IntoResponse> {
    let submitted = lock(&state).submit_task(&sid, req)?;
    Ok((StatusCode::CREATED, Json(submitted)))
}

#[derive(Debug, Deserialize)]
struct StreamQuery {
    #[serde(default)]
    from_seq: Option<u64>,
    #[serde(default)]
    view: Option<String>,
    /// Keep the response open for new events (default) or return the
    /// backlog and close.
    #[serde(default)]
    follow: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum View {
    User,
    Full,
}

fn visible(event: &StreamEvent, condition: Condition, view: View) -> bool {
    view == View::Full || condition == Condition::External || event.kind() != EventKind::StateTransition
}

struct Cursor {
    state: Shared,
    sid: String,
    next_index: usize,
    condition: Condition,
    view: View,
    follow: bool,
    changes: watch::Receiver<usize>,
    pending: VecDeque<String>,
}

impl Cursor {
    fn drain(&mut self) {
        let coordinator = lock(&self.state);
        let Ok(session) = coordinator.session(&self.sid) else {
            return;
        };
        let log = session.log();
        for event in &log[self.next_index.min(log.len())..] {
            if visible(event, self.condition, self.view) {
                let mut line = encode_event(event).expect("logged events are valid");
                line.push('\n');
                self.pending.push_back(line);
            }
        }
        self.next_index = log.len();
    }
}

async fn stream(
    State(state): State<Shared>,
    Path(sid): Path<String>,
    Query(query): Query<StreamQuery>,
) -> ApiResult<Response> {
    let view = match query.view.as_deref() {
        None | Some("user") => View::User,
        Some("full") => View::Full,
        Some(other) => return Err(CoordError::BadRequest(format!("unknown view `{other}`")).into()),
    };
    let (condition, changes) = {
        let coordinator = lock(&state);
        let session = coordinator.session(&sid)?;
        (session.condition, session.subscribe())
    };
    let from_seq = query.from_seq.unwrap_or(1).max(1);
    let cursor = Cursor {
        state,
        sid,
        next_index: (from_seq - 1) as usize,
        condition,
        view,
        follow: query.follow.unwrap_or(true),
        changes,
        pending: VecDeque::new(),
    };
    let body = futures::stream::unfold(cursor, |mut cursor| async move {
        loop {
            if let Some(line) = cursor.pending.pop_front() {
                return Some((Ok::<_, Infallible>(line), cursor));
            }
            cursor.changes.borrow_and_update();
            cursor.drain();
            if !cursor.pending.is_empty() {
                continue;
            }
            if !cursor.follow || cursor.changes.changed().await.is_err() {
                return None;
            }
        }
    });
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(body))
        .expect("static headers are valid"))
}

async fn events(State(state): State<Shared>, Path(sid): Path<String>) -> ApiResult<Response> {
    let coordinator = lock(&state);
    let mut text = String::new();
    for event in coordinator.session(&sid)?.log() {
        text.push_str(&encode_event(event).expect("logged events are valid"));
        text.push('\n');
    }
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], text).into_response())
}

async fn session_trials(State(state): State<Shared>, Path(sid): Path<String>) -> ApiResult<Response> {
    let coordinator = lock(&state);
    Ok(Json(coordinator.session(&sid)?.trials().to_vec()).into_response())
}

async fn all_trials(State(state): State<Shared>) -> Response {
    Json(lock(&state).trials()).into_response()
}

async fn confirm(
    State(state): State<Shared>,
    Path(tid): Path<String>,
    Json(req): Json<Confirm>,
) -> ApiResult<StatusCode> {
    lock(&state).handle_confirmation(&tid, req)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn register(State(state): State<Shared>) -> StatusCode {
    lock(&state).register_agent();
    StatusCode::NO_CONTENT
}

#[derive(Debug, Deserialize)]
struct WaitQuery {
    #[serde(default)]
    wait_ms: Option<u64>,
}

async fn next_task(State(state): State<Shared>, Query(query): Query<WaitQuery>) -> Response {
    let deadline = tokio::time::Instant::now() + Duration::from_millis(query.wait_ms.unwrap_or(DEFAULT_WAIT_MS));
    let notify = lock(&state).queue_notify();
    loop {
        let notified = notify.notified();
        tokio::pin!(notified);
        notified.as_mut().enable();
        if let Some(dispatch) = lock(&state).next_dispatch() {
            return Json(dispatch).into_response();
        }
        if tokio::time::timeout_at(deadline, notified).await.is_err() {
            return StatusCode::NO_CONTENT.into_response();
        }
    }
}

async fn state_update(
    State(state): State<Shared>,
    Path(tid): Path<String>,
    Json(update): Json<AgentStateUpdate>,
) -> ApiResult<StatusCode> {
    lock(&state).relay_state_update(&tid, update)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn decision(
    State(state): State<Shared>,
    Path(tid): Path<String>,
    Query(query): Query<WaitQuery>,
) -> ApiResult<Response> {
    let mut rx = lock(&state).directive_receiver(&tid)?;
    let wait = Duration::from_millis(query.wait_ms.unwrap_or(DEFAULT_WAIT_MS));
    let found = tokio::time::timeout(wait, rx.wait_for(Option::is_some)).await;
    Ok(match found {
        Ok(Ok(directive)) => Json(directive.expect("waited for Some")).into_response(),
        _ => StatusCode::NO_CONTENT.into_response(),
    })
}

//! HTTP routes.

use std::convert::Infallible;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use futures::stream::{self, BoxStream, StreamExt};
use genius_core::aeh::{ResultDocument, RunStatus, TimelineEvent, WorkflowState};
use serde::Deserialize;
use serde_json::json;
use tokio::sync::broadcast::error::RecvError;

use crate::backend::SetupError;
use crate::payload::WorkflowPayload;
use crate::registry::{Registry, RunEntry, StatusView};

pub const HEARTBEAT: Duration = Duration::from_secs(15);

#[derive(Clone)]
pub struct AppState {
    pub registry: Arc<Registry>,
    pub heartbeat: Duration,
}

impl AppState {
    pub fn new(registry: Registry) -> Self {
        AppState {
            registry: Arc::new(registry),
            heartbeat: HEARTBEAT,
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/workflow/", post(submit))
        .route("/workflow/{workflow_id}", delete(abort))
        .route("/workflow-status/{workflow_id}", get(status))
        .route("/results/{workflow_id}", get(results))
        .route("/timeline/{workflow_id}", get(timeline))
        .route("/logs", get(logs))
        .route("/kg.json", get(kg))
        .with_state(state)
}

fn error(code: StatusCode, message: impl Into<String>) -> Response {
    (code, Json(json!({"error": message.into()}))).into_response()
}

fn not_found(id: &str) -> Response {
    error(StatusCode::NOT_FOUND, format!("unknown workflow `{id}`"))
}

async fn submit(State(app): State<AppState>, body: Bytes) -> Response {
    let payload = match WorkflowPayload::from_json(&body) {
        Ok(p) => p,
        Err(errors) => return (StatusCode::BAD_REQUEST, Json(json!({"errors": errors}))).into_response(),
    };
    match app.registry.submit(&payload) {
        Ok(entry) => (StatusCode::ACCEPTED, Json(json!({"workflow_id": entry.workflow_id}))).into_response(),
        Err(SetupError::Invalid(errors)) => (StatusCode::BAD_REQUEST, Json(json!({"errors": errors}))).into_response(),
        Err(e @ SetupError::MissingKey { .. }) => error(StatusCode::UNAUTHORIZED, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

/// Runs from an earlier server process are answered from disk.
fn stored(app: &AppState, id: &str) -> Option<ResultDocument> {
    valid_id(id).then(|| app.registry.store.load_result(id).ok()).flatten()
}

/// Ids are hex; anything else never touches the file system.
fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.len() <= 64 && id.bytes().all(|b| b.is_ascii_hexdigit())
}

async fn status(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    if let Some(entry) = app.registry.get(&id) {
        return Json(entry.status()).into_response();
    }
    match stored(&app, &id) {
        Some(doc) => Json(StatusView {
            workflow_id: id,
            state: match doc.status {
                RunStatus::Success => WorkflowState::Finished,
                RunStatus::Failure => WorkflowState::Failure,
            },
            total_attempts: doc.total_attempts,
            model_index: doc.model_switches as usize,
            attempts_for_current_model: 0,
            done: true,
        })
        .into_response(),
        None => not_found(&id),
    }
}

fn result_body(doc: ResultDocument, input: Option<String>) -> Response {
    let mut body = serde_json::to_value(doc).expect("result serializes");
    if let Some(text) = input {
        body["pw_in"] = json!(text);
    }
    Json(body).into_response()
}

async fn results(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    if let Some(entry) = app.registry.get(&id) {
        return match entry.result() {
            Some((doc, input)) => result_body(doc, input),
            None => (
                StatusCode::CONFLICT,
                Json(json!({"error": "run still in progress", "state": entry.status().state})),
            )
                .into_response(),
        };
    }
    match stored(&app, &id) {
        Some(doc) => {
            let input = (doc.status == RunStatus::Success).then(|| app.registry.store.load_input(&id)).flatten();
            result_body(doc, input)
        }
        None => not_found(&id),
    }
}

fn stored_timeline(app: &AppState, id: &str) -> Option<Vec<TimelineEvent>> {
    valid_id(id).then(|| app.registry.store.load_timeline(id).ok()).flatten()
}

async fn timeline(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    if let Some(entry) = app.registry.get(&id) {
        return Json(entry.timeline()).into_response();
    }
    match stored_timeline(&app, &id) {
        Some(events) => Json(events).into_response(),
        None => not_found(&id),
    }
}

async fn abort(State(app): State<AppState>, Path(id): Path<String>) -> Response {
    match app.registry.abort(&id) {
        Some(true) => (StatusCode::ACCEPTED, Json(json!({"workflow_id": id, "aborting": true}))).into_response(),
        Some(false) => Json(json!({"workflow_id": id, "aborting": false})).into_response(),
        None if stored(&app, &id).is_some() => Json(json!({"workflow_id": id, "aborting": false})).into_response(),
        None => not_found(&id),
    }
}

async fn kg(State(app): State<AppState>) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], app.registry.engine.graph.to_document()).into_response()
}

#[derive(Debug, Deserialize)]
struct LogsQuery {
    workflow_id: Option<String>,
}

type EventStream = BoxStream<'static, Result<Event, Infallible>>;

fn sse_event(workflow_id: &str, index: usize, event: &TimelineEvent) -> Event {
    Event::default()
        .event("timeline")
        .id(format!("{workflow_id}:{index}"))
        .json_data(event)
        .expect("timeline event serializes")
}

/// Replays the run's timeline, follows it, and ends after the terminal
/// event once the result is recorded.
fn run_stream(entry: Arc<RunEntry>) -> EventStream {
    let rx = entry.subscribe();
    stream::unfold((entry, rx, 0usize, false), |(entry, mut rx, index, done)| async move {
        if done {
            // hold the close until /results can answer
            while !entry.is_done() {
                if rx.changed().await.is_err() {
                    break;
                }
            }
            return None;
        }
        loop {
            if let Some(ev) = entry.event_at(index) {
                let item = sse_event(&entry.workflow_id, index, &ev);
                let terminal = ev.state.is_terminal();
                return Some((Ok(item), (entry, rx, index + 1, terminal)));
            }
            if rx.changed().await.is_err() {
                return None;
            }
        }
    })
    .boxed()
}

fn replay_stream(id: String, events: Vec<TimelineEvent>) -> EventStream {
    stream::iter(events.into_iter().enumerate().map(move |(i, e)| Ok(sse_event(&id, i, &e)))).boxed()
}

fn feed_stream(app: &AppState) -> EventStream {
    let rx = app.registry.subscribe_all();
    stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(item) => return Some((Ok(sse_event(&item.workflow_id, item.index, &item.event)), rx)),
                Err(RecvError::Lagged(n)) => log::warn!("log stream dropped {n} events"),
                Err(RecvError::Closed) => return None,
            }
        }
    })
    .boxed()
}

async fn logs(State(app): State<AppState>, Query(q): Query<LogsQuery>) -> Response {
    let stream = match q.workflow_id {
        None => feed_stream(&app),
        Some(id) => match app.registry.get(&id) {
            Some(entry) => run_stream(entry),
            None => match stored_timeline(&app, &id) {
                Some(events) => replay_stream(id, events),
                None => return not_found(&id),
            },
        },
    };
    Sse::new(stream)
        .keep_alive(KeepAlive::new().interval(app.heartbeat).text("heartbeat"))
        .into_response()
}

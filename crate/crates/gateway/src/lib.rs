//! HTTP data plane for the dashboard: status snapshots, the SSE stream,
//! sparklines, kick and backend-switch commands, and a read view of the ledger.

use std::convert::Infallible;
use std::future::Future;
use std::sync::{Arc, Mutex, Weak};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::stream::{self, StreamExt};
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use hive_core::dashboard::{SnapshotCadence, StatusSnapshot};
use hive_core::fleet::{FleetError, KickResult, SessionState};
use hive_core::kernel::Kernel;
use hive_core::ledger::{ItemKind, ItemStatus, LedgerError, ListFilter};

mod proxy;

pub use proxy::proxy_router;

const UI: &str = include_str!("ui.html");
const DEFAULT_ACTOR: &str = "dashboard";

pub struct Gateway {
    kernel: Arc<Kernel>,
    tx: Mutex<Option<broadcast::Sender<Arc<StatusSnapshot>>>>,
}

impl Gateway {
    /// Hooks into the kernel's snapshot hub. Each SSE client gets its own
    /// receiver.
    pub fn new(kernel: Arc<Kernel>) -> Arc<Gateway> {
        let (tx, _) = broadcast::channel(64);
        let gw = Arc::new(Gateway { kernel, tx: Mutex::new(Some(tx)) });
        let weak: Weak<Gateway> = Arc::downgrade(&gw);
        gw.kernel.hub().subscribe(move |snap| {
            let Some(gw) = weak.upgrade() else { return false };
            let guard = gw.tx.lock().unwrap();
            match guard.as_ref() {
                Some(tx) => {
                    let _ = tx.send(Arc::clone(snap));
                    true
                }
                None => false,
            }
        });
        gw
    }

    pub fn kernel(&self) -> &Arc<Kernel> {
        &self.kernel
    }

    /// Number of connected SSE clients.
    pub fn stream_clients(&self) -> usize {
        self.tx.lock().unwrap().as_ref().map_or(0, |tx| tx.receiver_count())
    }

    /// Ends every open stream so a graceful shutdown does not wait on them.
    pub fn close(&self) {
        self.tx.lock().unwrap().take();
    }

    pub fn router(self: &Arc<Self>) -> Router {
        Router::new()
            .route("/", get(|| async { Html(UI) }))
            .route("/api/status", get(status))
            .route("/api/stream", get(stream_status))
            .route("/api/sparklines/{agent}", get(sparklines))
            .route("/api/agents/{name}/kick", post(kick))
            .route("/api/agents/{name}/backend", post(switch_backend))
            .route("/api/ledger", get(list_ledger).post(add_item))
            .route("/api/ledger/{id}/reopen", post(reopen))
            .with_state(Arc::clone(self))
    }
}

/// Serves `router` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    router: Router,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router).with_graceful_shutdown(shutdown).await
}

type AppState = State<Arc<Gateway>>;

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: impl ToString) -> Response {
    (status, Json(ErrorBody { error: message.to_string() })).into_response()
}

async fn status(State(gw): AppState) -> Json<StatusSnapshot> {
    Json(gw.kernel.snapshot())
}

fn status_event(snap: &StatusSnapshot) -> Result<Event, Infallible> {
    Ok(Event::default().event("status").data(serde_json::to_string(snap).expect("snapshot serializes")))
}

async fn stream_status(State(gw): AppState) -> Response {
    let Some(rx) = gw.tx.lock().unwrap().as_ref().map(|tx| tx.subscribe()) else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "shutting down");
    };
    let first = status_event(&gw.kernel.snapshot());
    let updates = stream::unfold((rx, SnapshotCadence::default()), |(mut rx, mut cadence)| async move {
        loop {
            match rx.recv().await {
                Ok(snap) if cadence.due(snap.at, snap.governor.mode) => {
                    return Some((status_event(&snap), (rx, cadence)));
                }
                Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => continue,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream::once(async { first }).chain(updates)).keep_alive(KeepAlive::default()).into_response()
}

async fn sparklines(State(gw): AppState, Path(agent): Path<String>) -> Response {
    match gw.kernel.sparklines(&agent) {
        Ok(series) => Json(series).into_response(),
        Err(e) => error(StatusCode::NOT_FOUND, format!("unknown agent {:?}", e.0)),
    }
}

/// Kick documents: `delivered`, `skipped` (with reason) or `unavailable`
/// (with the session state).
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum KickDocument {
    Result(KickResult),
    Unavailable { result: Unavailable, state: SessionState },
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Unavailable {
    Unavailable,
}

async fn kick(State(gw): AppState, Path(name): Path<String>) -> Response {
    let kernel = Arc::clone(&gw.kernel);
    let result = tokio::task::spawn_blocking(move || kernel.manual_kick(&name)).await;
    match result {
        Ok(Ok(r)) => Json(KickDocument::Result(r)).into_response(),
        Ok(Err(FleetError::AgentUnavailable(state))) => {
            Json(KickDocument::Unavailable { result: Unavailable::Unavailable, state }).into_response()
        }
        Ok(Err(e)) => fleet_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

fn fleet_error(e: FleetError) -> Response {
    let status = match e {
        FleetError::UnknownAgent(_) => StatusCode::NOT_FOUND,
        FleetError::UnknownBackend(_) => StatusCode::BAD_REQUEST,
        FleetError::AgentUnavailable(_) | FleetError::Precondition { .. } => StatusCode::CONFLICT,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error(status, e)
}

#[derive(Deserialize)]
struct SwitchBody {
    backend_id: String,
}

async fn switch_backend(
    State(gw): AppState,
    Path(name): Path<String>,
    body: Result<Json<SwitchBody>, JsonRejection>,
) -> Response {
    let Json(body) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let kernel = Arc::clone(&gw.kernel);
    let result = tokio::task::spawn_blocking(move || kernel.switch_backend(&name, &body.backend_id)).await;
    match result {
        Ok(Ok(outcome)) => Json(outcome).into_response(),
        Ok(Err(e)) => fleet_error(e),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
    }
}

#[derive(Deserialize)]
struct LedgerQuery {
    status: Option<String>,
    repo: Option<String>,
}

async fn list_ledger(State(gw): AppState, Query(q): Query<LedgerQuery>) -> Response {
    let mut filter = ListFilter::default();
    if let Some(s) = q.status.filter(|s| !s.is_empty()) {
        match s.parse::<ItemStatus>() {
            Ok(status) => filter = ListFilter::status(status),
            Err(e) => return error(StatusCode::BAD_REQUEST, e),
        }
    }
    if let Some(repo) = q.repo {
        filter = filter.with_repo(repo);
    }
    Json(gw.kernel.ledger().list(&filter)).into_response()
}

fn ledger_error(e: LedgerError) -> Response {
    let status = match e {
        LedgerError::NotFound(_) => StatusCode::NOT_FOUND,
        LedgerError::InvalidInput(_) => StatusCode::BAD_REQUEST,
        LedgerError::InvalidState { .. } | LedgerError::AlreadyClaimed(_) | LedgerError::NotOwner { .. } => {
            StatusCode::CONFLICT
        }
        LedgerError::Corrupt(_) | LedgerError::Storage(_) => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error(status, e)
}

#[derive(Deserialize)]
struct NewItem {
    repo: String,
    #[serde(default = "issue")]
    kind: ItemKind,
    title: String,
    actor: Option<String>,
}

fn issue() -> ItemKind {
    ItemKind::Issue
}

async fn add_item(State(gw): AppState, body: Result<Json<NewItem>, JsonRejection>) -> Response {
    let Json(item) = match body {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.body_text()),
    };
    let actor = item.actor.as_deref().unwrap_or(DEFAULT_ACTOR);
    match gw.kernel.ledger().add_item(&item.repo, item.kind, &item.title, actor) {
        Ok(created) => (StatusCode::CREATED, Json(created)).into_response(),
        Err(e) => ledger_error(e),
    }
}

#[derive(Deserialize, Default)]
struct ReopenBody {
    #[serde(default)]
    reason: String,
    actor: Option<String>,
}

async fn reopen(State(gw): AppState, Path(id): Path<String>, body: Option<Json<ReopenBody>>) -> Response {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let actor = body.actor.as_deref().unwrap_or(DEFAULT_ACTOR);
    match gw.kernel.ledger().reopen(&id, actor, &body.reason) {
        Ok(item) => Json(item).into_response(),
        Err(e) => ledger_error(e),
    }
}

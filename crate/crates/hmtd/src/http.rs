//! HTTP routing over [`Hmtd`]. Bodies are JSON; every error answers with
//! `{code, message, detail}`.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use hmtd_core::collab::{CollabError, CollabState, IndicationPayload};
use hmtd_core::context::Connectivity;
use hmtd_core::prescription::SessionId;
use hmtd_core::tag::{TagIdentity, TagKind};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use tokio::net::TcpListener;

use crate::error::ServiceError;
use crate::service::{BindTarget, Hmtd, ServiceConfig};

/// Longest a poll for indications is held open.
pub const MAX_POLL_WAIT: Duration = Duration::from_secs(25);

type Shared = State<Arc<Hmtd>>;
type Reply = Result<Response, ServiceError>;

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(code = self.code(), "{self}");
        } else {
            tracing::debug!(code = self.code(), "{self}");
        }
        let body = json!({"code": self.code(), "message": self.to_string(), "detail": self.detail()});
        (status, Json(body)).into_response()
    }
}

fn ok<T: serde::Serialize>(value: T) -> Reply {
    Ok(Json(value).into_response())
}

fn created<T: serde::Serialize>(value: T) -> Reply {
    Ok((StatusCode::CREATED, Json(value)).into_response())
}

fn id<T: FromStr>(raw: &str) -> Result<T, ServiceError> {
    raw.parse().map_err(|_| ServiceError::BadRequest(format!("`{raw}` is not a valid id")))
}

fn body<T: DeserializeOwned>(bytes: &Bytes) -> Result<T, ServiceError> {
    serde_json::from_slice(bytes).map_err(|e| ServiceError::BadRequest(e.to_string()))
}

fn session_id(raw: &str) -> Result<SessionId, ServiceError> {
    id(raw).map(SessionId)
}

fn parse_mode(raw: &str) -> Result<Connectivity, ServiceError> {
    match raw.to_ascii_lowercase().as_str() {
        "online" => Ok(Connectivity::Online),
        "offline" => Ok(Connectivity::Offline),
        _ => Err(ServiceError::BadRequest(format!("mode must be online or offline, got `{raw}`"))),
    }
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct CreateSession {
    badge_id: u32,
    workflow_id: u16,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct Bind {
    machine_id: Option<u32>,
    machine_tag_file: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct Scan {
    kind: String,
    tag_id: u32,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct Defect {
    part_id: u32,
    replacement_id: u32,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct Assist {
    expert_id: String,
}

#[derive(Deserialize)]
struct SetConnectivity {
    mode: String,
}

pub fn router(hmtd: Arc<Hmtd>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/workflows", get(workflows))
        .route("/connectivity", get(connectivity).put(set_connectivity))
        .route("/sessions", get(list_sessions).post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/bind", post(bind_machine))
        .route("/sessions/{id}/scan", post(scan))
        .route("/sessions/{id}/defect", post(defect))
        .route("/sessions/{id}/complete", post(complete))
        .route("/sessions/{id}/abort", post(abort))
        .route("/sessions/{id}/assist", post(assist))
        .route("/sessions/{id}/trace", get(session_trace))
        .route("/sessions/{id}/replay", get(replay))
        .route("/collab", get(list_collabs))
        .route("/collab/{id}", get(get_collab))
        .route("/collab/{id}/refresh", post(refresh_collab))
        .route("/collab/{id}/close", post(close_collab))
        .route("/collab/{id}/indications", get(poll).post(send_indication))
        .route("/machines/{id}/context", get(machine_context))
        .route("/trace/parts/{id}", get(trace_parts))
        .route("/trace/tools/{id}", get(trace_tools))
        .fallback(not_found)
        .with_state(hmtd)
}

async fn not_found() -> Response {
    let body = json!({"code": "NotFound", "message": "no such endpoint", "detail": null});
    (StatusCode::NOT_FOUND, Json(body)).into_response()
}

async fn health(State(hmtd): Shared) -> Reply {
    ok(json!({"status": "ok", "events": hmtd.ledger().len(), "connectivity": hmtd.connectivity()}))
}

async fn workflows(State(hmtd): Shared) -> Reply {
    ok(hmtd.workflows())
}

async fn connectivity(State(hmtd): Shared) -> Reply {
    ok(json!({"mode": hmtd.connectivity()}))
}

async fn set_connectivity(State(hmtd): Shared, bytes: Bytes) -> Reply {
    let request: SetConnectivity = body(&bytes)?;
    let synced = hmtd.set_connectivity(parse_mode(&request.mode)?)?;
    ok(json!({"mode": hmtd.connectivity(), "synced": synced}))
}

async fn list_sessions(State(hmtd): Shared) -> Reply {
    ok(hmtd.sessions())
}

async fn create_session(State(hmtd): Shared, bytes: Bytes) -> Reply {
    let request: CreateSession = body(&bytes)?;
    created(hmtd.create_session(request.badge_id, request.workflow_id)?)
}

async fn get_session(State(hmtd): Shared, Path(raw): Path<String>) -> Reply {
    ok(hmtd.session(session_id(&raw)?)?)
}

async fn bind_machine(State(hmtd): Shared, Path(raw): Path<String>, bytes: Bytes) -> Reply {
    let request: Bind = body(&bytes)?;
    let target = match (&request.machine_id, &request.machine_tag_file) {
        (Some(id), None) => BindTarget::MachineId(*id),
        (None, Some(path)) => BindTarget::TagFile(path),
        _ => return Err(ServiceError::BadRequest("give exactly one of machine-id or machine-tag-file".into())),
    };
    ok(hmtd.bind(session_id(&raw)?, target)?)
}

async fn scan(State(hmtd): Shared, Path(raw): Path<String>, bytes: Bytes) -> Reply {
    let request: Scan = body(&bytes)?;
    let kind = TagKind::from_str(&request.kind)?;
    ok(hmtd.scan(session_id(&raw)?, TagIdentity::new(kind, request.tag_id)?)?)
}

async fn defect(State(hmtd): Shared, Path(raw): Path<String>, bytes: Bytes) -> Reply {
    let request: Defect = body(&bytes)?;
    ok(hmtd.report_defect(session_id(&raw)?, request.part_id, request.replacement_id)?)
}

async fn complete(State(hmtd): Shared, Path(raw): Path<String>) -> Reply {
    ok(hmtd.complete(session_id(&raw)?)?)
}

async fn abort(State(hmtd): Shared, Path(raw): Path<String>) -> Reply {
    ok(hmtd.abort(session_id(&raw)?)?)
}

async fn assist(State(hmtd): Shared, Path(raw): Path<String>, bytes: Bytes) -> Reply {
    let request: Assist = body(&bytes)?;
    created(hmtd.assist(session_id(&raw)?, &request.expert_id)?)
}

async fn session_trace(State(hmtd): Shared, Path(raw): Path<String>) -> Reply {
    ok(hmtd.session_events(session_id(&raw)?)?)
}

async fn replay(State(hmtd): Shared, Path(raw): Path<String>) -> Reply {
    ok(hmtd.replay(session_id(&raw)?)?)
}

async fn list_collabs(State(hmtd): Shared) -> Reply {
    ok(hmtd.collabs())
}

async fn get_collab(State(hmtd): Shared, Path(raw): Path<String>) -> Reply {
    ok(hmtd.collab(id(&raw)?)?)
}

async fn refresh_collab(State(hmtd): Shared, Path(raw): Path<String>) -> Reply {
    ok(hmtd.refresh_collab(id(&raw)?)?)
}

async fn close_collab(State(hmtd): Shared, Path(raw): Path<String>) -> Reply {
    ok(hmtd.close_collab(id(&raw)?)?)
}

async fn send_indication(State(hmtd): Shared, Path(raw): Path<String>, bytes: Bytes) -> Reply {
    let collab_id = id(&raw)?;
    let payload: IndicationPayload = serde_json::from_slice(&bytes)
        .map_err(|e| ServiceError::from(CollabError::MalformedIndication(e.to_string())))?;
    created(json!({"seq": hmtd.send_indication(collab_id, payload)?}))
}

/// Returns indications after `after` at once if there are any, otherwise
/// waits up to `wait` milliseconds (capped) for the next one.
async fn poll(State(hmtd): Shared, Path(raw): Path<String>, Query(query): Query<HashMap<String, String>>) -> Reply {
    let collab_id = id(&raw)?;
    let after: u64 = query.get("after").map(|a| id(a)).transpose()?.unwrap_or(0);
    let wait = match query.get("wait") {
        Some(ms) => Duration::from_millis(id(ms)?).min(MAX_POLL_WAIT),
        None => MAX_POLL_WAIT,
    };
    let slot = hmtd.slot(collab_id)?;
    let deadline = tokio::time::Instant::now() + wait;
    loop {
        let notified = slot.notify.notified();
        tokio::pin!(notified);
        notified.as_mut().enable();
        let (items, closed) = {
            let collab = slot.lock();
            (collab.poll_indications(after), collab.state() == CollabState::Closed)
        };
        if !items.is_empty() || closed || wait.is_zero() {
            return ok(items);
        }
        if tokio::time::timeout_at(deadline, notified).await.is_err() {
            return ok(items);
        }
    }
}

async fn machine_context(
    State(hmtd): Shared,
    Path(raw): Path<String>,
    Query(query): Query<HashMap<String, String>>,
) -> Reply {
    let mode = query.get("mode").map(|m| parse_mode(m)).transpose()?;
    let badge = query.get("badge-id").map(|b| id(b)).transpose()?;
    ok(hmtd.context(id(&raw)?, mode, badge)?)
}

async fn trace_parts(State(hmtd): Shared, Path(raw): Path<String>) -> Reply {
    ok(hmtd.part_history(id(&raw)?))
}

async fn trace_tools(State(hmtd): Shared, Path(raw): Path<String>) -> Reply {
    ok(hmtd.tool_usage(id(&raw)?))
}

#[derive(Debug)]
pub struct ServeConfig {
    pub addr: SocketAddr,
    pub service: ServiceConfig,
}

/// A service whose data directory is open and whose socket is bound.
pub struct BoundServer {
    listener: TcpListener,
    hmtd: Arc<Hmtd>,
}

impl BoundServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener has an address")
    }

    pub fn hmtd(&self) -> Arc<Hmtd> {
        self.hmtd.clone()
    }

    pub async fn run_until(self, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServiceError> {
        axum::serve(self.listener, router(self.hmtd))
            .with_graceful_shutdown(shutdown)
            .await
            .map_err(|e| ServiceError::BindFailure(e.to_string()))
    }
}

pub async fn bind(config: ServeConfig) -> Result<BoundServer, ServiceError> {
    let hmtd = Arc::new(Hmtd::open(config.service)?);
    let listener = TcpListener::bind(config.addr)
        .await
        .map_err(|e| ServiceError::BindFailure(format!("{}: {e}", config.addr)))?;
    Ok(BoundServer { listener, hmtd })
}

/// Binds and serves until interrupted.
pub async fn serve(config: ServeConfig) -> Result<(), ServiceError> {
    let server = bind(config).await?;
    println!("listening on {}", server.local_addr());
    server
        .run_until(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

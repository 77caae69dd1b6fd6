//! HTTP front end. Handlers run monitor calls on the blocking pool; the
//! monitor's own lock serializes writers and lets readers proceed together.

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tokio::sync::oneshot;

use rollguard_core::monitor::Monitor;
use rollguard_core::records::ObjectId;

use crate::api::{ApiError, EligibilityQuery, Envelope, SCHEMA_VERSION};
use crate::backend::{ApiResult, Backend};

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self.body)).into_response()
    }
}

type Shared = Arc<Monitor>;

async fn blocking<T, F>(m: Shared, f: F) -> Response
where
    T: Serialize + Send + 'static,
    F: FnOnce(&Monitor) -> ApiResult<T> + Send + 'static,
{
    match tokio::task::spawn_blocking(move || f(&m)).await {
        Ok(Ok(body)) => Json(body).into_response(),
        Ok(Err(e)) => e.into_response(),
        Err(e) => ApiError::new(500, "internal", e.to_string()).into_response(),
    }
}

fn unwrap_envelope<T>(body: Result<Json<Envelope<T>>, JsonRejection>) -> ApiResult<T> {
    let Json(env) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    if env.schema != SCHEMA_VERSION {
        return Err(ApiError::bad_request(format!(
            "unsupported schema {}, this service speaks {SCHEMA_VERSION}",
            env.schema
        )));
    }
    Ok(env.request)
}

macro_rules! tx_handler {
    ($name:ident, $req:ty, $method:ident) => {
        async fn $name(State(m): State<Shared>, body: Result<Json<Envelope<$req>>, JsonRejection>) -> Response {
            match unwrap_envelope(body) {
                Ok(req) => blocking(m, move |m| Backend::$method(m, req)).await,
                Err(e) => e.into_response(),
            }
        }
    };
}

tx_handler!(state_update, rollguard_core::monitor::UpdateRequest, update);
tx_handler!(take_snapshot, rollguard_core::monitor::SnapshotRequest, snapshot);
tx_handler!(rollback, rollguard_core::monitor::RollbackRequest, rollback);
tx_handler!(prune, rollguard_core::monitor::PruneRequest, prune);

async fn checkpoint(State(m): State<Shared>) -> Response {
    blocking(m, Backend::checkpoint).await
}

async fn snapshots(State(m): State<Shared>) -> Response {
    blocking(m, |m| m.snapshots()).await
}

async fn lineage(State(m): State<Shared>, Path(object): Path<String>) -> Response {
    match ObjectId::new(object) {
        Ok(o) => blocking(m, move |m| m.lineage(&o)).await,
        Err(e) => ApiError::bad_request(e).into_response(),
    }
}

async fn eligibility(State(m): State<Shared>, q: Result<Query<EligibilityQuery>, QueryRejection>) -> Response {
    match q {
        Ok(Query(q)) => blocking(m, move |m| m.eligibility(&q)).await,
        Err(e) => ApiError::bad_request(e.body_text()).into_response(),
    }
}

async fn verify(State(m): State<Shared>) -> Response {
    blocking(m, |m| m.verify()).await
}

async fn fallback() -> Response {
    ApiError::new(404, "not-found", "no such endpoint").into_response()
}

pub fn router(monitor: Arc<Monitor>) -> Router {
    Router::new()
        .route("/v1/state_update", post(state_update))
        .route("/v1/take_snapshot", post(take_snapshot))
        .route("/v1/rollback", post(rollback))
        .route("/v1/prune", post(prune))
        .route("/v1/checkpoint", get(checkpoint))
        .route("/v1/snapshots", get(snapshots))
        .route("/v1/lineage/{object}", get(lineage))
        .route("/v1/eligibility", get(eligibility))
        .route("/v1/verify", get(verify))
        .fallback(fallback)
        .with_state(monitor)
}

pub async fn serve(
    listener: tokio::net::TcpListener,
    monitor: Arc<Monitor>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(monitor)).with_graceful_shutdown(shutdown).await
}

/// A server running on its own runtime thread; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<std::io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(stop) = self.stop.take() {
            let _ = stop.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Binds `addr` (port 0 picks a free port) and serves in the background.
pub fn spawn(monitor: Arc<Monitor>, addr: &str) -> std::io::Result<ServerHandle> {
    let std_listener = std::net::TcpListener::bind(addr)?;
    std_listener.set_nonblocking(true)?;
    let local = std_listener.local_addr()?;
    let (stop, stopped) = oneshot::channel::<()>();
    let thread = std::thread::Builder::new().name("rollguard-http".into()).spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener)?;
            serve(listener, monitor, async {
                let _ = stopped.await;
            })
            .await
        })
    })?;
    Ok(ServerHandle {
        addr: local,
        stop: Some(stop),
        thread: Some(thread),
    })
}

//! HTTP JSON service over a store directory.
//!
//! Recommendations are answered from an immutable [`Engine`] that is swapped
//! atomically on refresh. Event appends go through one writer behind a mutex.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;

use swipecf_core::dedup::ProductClusterMap;
use swipecf_core::eventstore::EventStore;
use swipecf_core::model::UserId;
use swipecf_core::recommender::DEFAULT_QUEUE_LEN;

use crate::engine::{evaluate_store, ingest_text, window_from_bounds, Engine, EngineInfo};
use crate::error::AppError;

impl IntoResponse for AppError {
    fn into_response(self) -> Response {
        let status = match &self {
            AppError::InvalidArgument(_) | AppError::Validation { .. } => StatusCode::BAD_REQUEST,
            AppError::UnknownUser(_) => StatusCode::NOT_FOUND,
            AppError::MissingStore(_) | AppError::Io(_) => StatusCode::SERVICE_UNAVAILABLE,
            AppError::Corrupt(_) => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(self.to_json())).into_response()
    }
}

pub struct AppState {
    dir: PathBuf,
    clusters: Option<ProductClusterMap>,
    engine: RwLock<Option<Arc<Engine>>>,
    writer: Mutex<Option<EventStore>>,
}

impl AppState {
    /// Loads the engine eagerly; a store that cannot be read yet leaves the
    /// service answering 503 until a refresh succeeds.
    pub fn new(dir: PathBuf, clusters: Option<ProductClusterMap>) -> Arc<Self> {
        let engine = Engine::load(&dir, clusters.as_ref()).ok().map(Arc::new);
        Arc::new(Self {
            dir,
            clusters,
            engine: RwLock::new(engine),
            writer: Mutex::new(None),
        })
    }

    pub fn engine(&self) -> Result<Arc<Engine>, AppError> {
        self.engine
            .read()
            .expect("engine lock poisoned")
            .clone()
            .ok_or_else(|| AppError::MissingStore(self.dir.clone()))
    }

    /// Rebuilds the engine from the store and swaps it in.
    pub fn refresh(&self) -> Result<EngineInfo, AppError> {
        let fresh = Arc::new(Engine::load(&self.dir, self.clusters.as_ref())?);
        let info = fresh.info();
        *self.engine.write().expect("engine lock poisoned") = Some(fresh);
        Ok(info)
    }

    fn ingest(&self, text: &str) -> Result<swipecf_core::eventstore::IngestReport, AppError> {
        let mut guard = self.writer.lock().expect("writer lock poisoned");
        if guard.is_none() {
            *guard = Some(EventStore::open(&self.dir)?);
        }
        let store = guard.as_mut().expect("writer opened above");
        let result = ingest_text(store, text);
        if matches!(result, Err(AppError::Io(_))) {
            // Reopen on the next request; the store drops any torn tail.
            *guard = None;
        }
        result
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/recommendations/{user_id}", get(recommendations))
        .route("/v1/events", post(events))
        .route("/v1/metrics", get(metrics))
        .route("/v1/healthz", get(healthz))
        .route("/v1/admin/refresh", post(refresh))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
struct RecommendParams {
    n: Option<usize>,
}

async fn recommendations(
    State(state): State<Arc<AppState>>,
    Path(user_id): Path<String>,
    Query(params): Query<RecommendParams>,
) -> Result<Response, AppError> {
    let engine = state.engine()?;
    let n = params.n.unwrap_or(DEFAULT_QUEUE_LEN);
    let response = engine.recommend(&UserId::new(user_id), n)?;
    Ok(Json(response).into_response())
}

async fn events(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Response, AppError> {
    let text = String::from_utf8(body.to_vec())
        .map_err(|_| AppError::InvalidArgument("request body is not UTF-8".into()))?;
    let report = blocking(move || state.ingest(&text)).await?;
    if report.accepted == 0 && report.rejected > 0 {
        return Err(AppError::Validation {
            message: format!("all {} records rejected", report.rejected),
            report: Some(report),
        });
    }
    Ok((StatusCode::ACCEPTED, Json(report)).into_response())
}

#[derive(Debug, Deserialize)]
struct MetricsParams {
    from: Option<String>,
    to: Option<String>,
}

async fn metrics(
    State(state): State<Arc<AppState>>,
    Query(params): Query<MetricsParams>,
) -> Result<Response, AppError> {
    let window = window_from_bounds(params.from.as_deref(), params.to.as_deref())?;
    let report =
        blocking(move || evaluate_store(&state.dir, window, state.clusters.as_ref())).await?;
    Ok(Json(report).into_response())
}

async fn healthz(State(state): State<Arc<AppState>>) -> Response {
    let engine = state.engine().ok().map(|e| e.info());
    Json(json!({ "status": "ok", "engine": engine })).into_response()
}

async fn refresh(State(state): State<Arc<AppState>>) -> Result<Response, AppError> {
    let info = blocking(move || state.refresh()).await?;
    Ok(Json(info).into_response())
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, AppError> + Send + 'static,
) -> Result<T, AppError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| AppError::Io(format!("worker failed: {e}")))?
}

/// Serves until ctrl-c, refreshing the engine every `refresh_every`.
pub async fn serve(
    dir: PathBuf,
    listen: SocketAddr,
    clusters: Option<ProductClusterMap>,
    refresh_every: Duration,
) -> Result<(), AppError> {
    let state = AppState::new(dir, clusters);
    if let Err(e) = state.engine() {
        eprintln!("{}", e.to_json());
    }
    let ticker = Arc::clone(&state);
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(refresh_every);
        interval.tick().await;
        loop {
            interval.tick().await;
            let s = Arc::clone(&ticker);
            if let Err(e) = blocking(move || s.refresh()).await {
                eprintln!("{}", e.to_json());
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(listen).await?;
    eprintln!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

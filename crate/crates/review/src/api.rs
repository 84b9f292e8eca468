//! HTTP routes.

use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::json;
use synthqa_core::review::{DecisionRequest, QueueFilter};
use tracing::error;

use crate::store::{ReviewStore, StoreError};

pub const DEFAULT_PAGE_SIZE: usize = 50;
pub const MAX_PAGE_SIZE: usize = 500;

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<Mutex<ReviewStore>>,
    /// Queue filter used when a request names none.
    pub default_filter: QueueFilter,
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match &e {
            StoreError::UnknownPair(_) => StatusCode::NOT_FOUND,
            StoreError::InvalidDecision(_) => StatusCode::UNPROCESSABLE_ENTITY,
            StoreError::DatasetChanged => StatusCode::CONFLICT,
            _ => {
                error!(error = %e, "review store failure");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        ApiError(status, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn locked<T>(state: &AppState, f: impl FnOnce(&mut ReviewStore) -> Result<T, StoreError>) -> ApiResult<T> {
    let mut store = state.store.lock().map_err(|_| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "state lock poisoned".into()))?;
    store.check_dataset()?;
    Ok(f(&mut store)?)
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    status: Option<QueueFilter>,
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn queue(State(state): State<AppState>, Query(q): Query<QueueParams>) -> ApiResult<impl IntoResponse> {
    let filter = q.status.unwrap_or(state.default_filter);
    let limit = q.limit.unwrap_or(DEFAULT_PAGE_SIZE).min(MAX_PAGE_SIZE);
    let page = locked(&state, |s| Ok(s.queue(filter, q.offset.unwrap_or(0), limit)))?;
    Ok(Json(page))
}

async fn pair(State(state): State<AppState>, Path(pair_id): Path<String>) -> ApiResult<impl IntoResponse> {
    Ok(Json(locked(&state, |s| s.detail(&pair_id))?))
}

async fn decide(State(state): State<AppState>, Path(pair_id): Path<String>, body: Bytes) -> ApiResult<impl IntoResponse> {
    // Unknown pair wins over a bad body.
    locked(&state, |s| s.detail(&pair_id).map(|_| ()))?;
    let req: DecisionRequest = serde_json::from_slice(&body)
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, format!("malformed decision: {e}")))?;
    Ok(Json(locked(&state, |s| s.decide(&pair_id, req))?))
}

async fn stats(State(state): State<AppState>) -> ApiResult<impl IntoResponse> {
    Ok(Json(locked(&state, |s| Ok(s.stats()))?))
}

#[derive(Debug, Deserialize)]
struct ExportParams {
    format: Option<String>,
}

async fn export(State(state): State<AppState>, Query(q): Query<ExportParams>) -> ApiResult<impl IntoResponse> {
    match q.format.as_deref() {
        None | Some("jsonl") => {}
        Some(other) => return Err(ApiError(StatusCode::BAD_REQUEST, format!("unsupported export format {other:?}"))),
    }
    let body = locked(&state, |s| Ok(s.export()))?;
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/pairs/{pair_id}", get(pair))
        .route("/api/pairs/{pair_id}/decision", post(decide))
        .route("/api/stats", get(stats))
        .route("/api/export", get(export))
        .with_state(state)
}

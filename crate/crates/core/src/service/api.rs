use std::future::Future;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use super::state::{ApiError, CreateSession, ResponseSubmission};
use super::ServiceState;

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

pub fn router(state: Arc<ServiceState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next-trial", get(next_trial))
        .route("/sessions/{id}/responses", post(submit_response))
        .route("/sessions/{id}/status", get(status))
        .route("/sessions/{id}/results", get(results))
        .route("/stimuli/{id}", get(stimulus))
        .with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: Arc<ServiceState>,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

fn parse<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("invalid request body: {e}")))
}

async fn create_session(State(state): State<Arc<ServiceState>>, headers: HeaderMap, body: Bytes) -> Result<Response, ApiError> {
    let mut req: CreateSession = parse(&body)?;
    if let Some(key) = headers.get("idempotency-key") {
        let key = key
            .to_str()
            .map_err(|_| ApiError::new(StatusCode::BAD_REQUEST, "idempotency key must be ASCII"))?;
        match &req.idempotency_key {
            Some(body_key) if body_key != key => {
                return Err(ApiError::new(StatusCode::BAD_REQUEST, "idempotency key differs between header and body"));
            }
            _ => req.idempotency_key = Some(key.to_string()),
        }
    }
    let (id, created) = state.create_session(req).await?;
    let code = if created { StatusCode::CREATED } else { StatusCode::OK };
    Ok((code, Json(json!({ "sessionId": id }))).into_response())
}

async fn next_trial(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(state.next_trial(&id).await?).into_response())
}

async fn submit_response(
    State(state): State<Arc<ServiceState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Response, ApiError> {
    let sub: ResponseSubmission = parse(&body)?;
    Ok(Json(state.submit(&id, sub).await?).into_response())
}

async fn status(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(state.status(&id).await?).into_response())
}

async fn results(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    Ok(Json(state.results(&id).await?).into_response())
}

async fn stimulus(State(state): State<Arc<ServiceState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, format!("unknown stimulus {id}"));
    let path = state.stimulus_path(&id).ok_or_else(not_found)?;
    let bytes = tokio::task::spawn_blocking(move || std::fs::read(path))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
        .map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

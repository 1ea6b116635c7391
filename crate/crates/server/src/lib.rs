//! HTTP review API.
//!
//! Routes:
//! - `GET /sessions`: session summaries, newest first.
//! - `GET /sessions/{id}`: full session detail with DVH curves and the
//!   per-iteration trace.
//! - `POST /sessions/{id}/decision`: accept or refine. The reviewer id comes
//!   from the body or the `x-reviewer-id` header. A refine verdict returns
//!   `202` with status `Refined`; the round runs in the background and the
//!   session returns to `AwaitingReview` when it completes.
//!
//! Errors are JSON objects `{"error": kind, "message": text}` with status
//! 404 (unknown session), 409 (session not reviewable), 422 (invalid
//! decision) or 400 (malformed body).

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use srsplan_core::agent::SessionStatus;
use srsplan_core::review::{DecisionRequest, ReviewError, ReviewService, SessionDetail, SessionSummary};

pub const REVIEWER_HEADER: &str = "x-reviewer-id";

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

#[derive(Debug)]
pub struct ApiError(StatusCode, &'static str, String);

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let (status, kind) = match &e {
            ReviewError::NotFound(_) => (StatusCode::NOT_FOUND, "not-found"),
            ReviewError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            ReviewError::InvalidArgument(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid-argument"),
            ReviewError::Io(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io-error"),
            ReviewError::Agent(_) => (StatusCode::INTERNAL_SERVER_ERROR, "planning-error"),
        };
        ApiError(status, kind, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError(StatusCode::BAD_REQUEST, "bad-request", e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(ErrorBody { error: self.1, message: self.2 })).into_response()
    }
}

type AppState = Arc<ReviewService>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ReviewError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

async fn list_sessions(State(svc): State<AppState>) -> Result<Json<Vec<SessionSummary>>, ApiError> {
    Ok(Json(blocking(move || svc.list_sessions()).await?))
}

async fn get_session(State(svc): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionDetail>, ApiError> {
    Ok(Json(blocking(move || svc.get_session(&id)).await?))
}

async fn submit_decision(
    State(svc): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<DecisionRequest>, JsonRejection>,
) -> Result<(StatusCode, Json<SessionSummary>), ApiError> {
    let Json(mut request) = body?;
    if request.reviewer_id.is_none() {
        request.reviewer_id = headers.get(REVIEWER_HEADER).and_then(|v| v.to_str().ok()).map(str::to_string);
    }
    let svc2 = svc.clone();
    let id2 = id.clone();
    let summary = blocking(move || svc2.submit_decision(&id2, &request)).await?;
    if summary.status == SessionStatus::Refined {
        spawn_refinement(svc, id);
        return Ok((StatusCode::ACCEPTED, Json(summary)));
    }
    Ok((StatusCode::OK, Json(summary)))
}

fn spawn_refinement(svc: AppState, id: String) -> tokio::task::JoinHandle<()> {
    tokio::task::spawn_blocking(move || match svc.run_refinement(&id) {
        Ok(s) => tracing::info!(session = %id, status = ?s.status, round = s.round, "refinement finished"),
        Err(e) => tracing::error!(session = %id, error = %e, "refinement failed"),
    })
}

/// Restarts refinement rounds left pending by a previous process.
pub fn resume_pending(svc: &AppState) -> Result<Vec<tokio::task::JoinHandle<()>>, ReviewError> {
    Ok(svc
        .list_sessions()?
        .into_iter()
        .filter(|s| s.status == SessionStatus::Refined)
        .map(|s| {
            tracing::info!(session = %s.session_id, "resuming pending refinement");
            spawn_refinement(svc.clone(), s.session_id)
        })
        .collect())
}

pub fn router(svc: AppState) -> Router {
    Router::new()
        .route("/sessions", get(list_sessions))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/decision", post(submit_decision))
        .with_state(svc)
}

/// Serves the review API until the process is stopped.
pub async fn serve(svc: AppState, addr: SocketAddr) -> std::io::Result<()> {
    resume_pending(&svc).map_err(std::io::Error::other)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "review api listening");
    axum::serve(listener, router(svc)).await
}

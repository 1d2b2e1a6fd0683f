//! HTTP API over a [`Planner`].

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::net::TcpListener;

use crate::orchestrator::{ErrorCode, Planner, ReplyError, SolveRequest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MessageRequest {
    pub text: String,
}

struct ApiError(StatusCode, ReplyError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn bad_request(rejection: JsonRejection) -> ApiError {
    ApiError(
        StatusCode::BAD_REQUEST,
        ReplyError::new(ErrorCode::BadRequest, rejection.body_text(), None),
    )
}

fn unknown_session(id: &str) -> ApiError {
    ApiError(
        StatusCode::NOT_FOUND,
        ReplyError::new(
            ErrorCode::UnknownSession,
            format!("no session `{id}`"),
            Some("session_id"),
        ),
    )
}

fn internal(e: tokio::task::JoinError) -> ApiError {
    ApiError(
        StatusCode::INTERNAL_SERVER_ERROR,
        ReplyError::new(ErrorCode::SolverError, e.to_string(), None),
    )
}

async fn create_session(State(planner): State<Arc<Planner>>) -> impl IntoResponse {
    let session_id = planner.create_session();
    (StatusCode::CREATED, Json(SessionCreated { session_id }))
}

async fn post_message(
    State(planner): State<Arc<Planner>>,
    Path(id): Path<String>,
    body: Result<Json<MessageRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(body) = body.map_err(bad_request)?;
    if body.text.trim().is_empty() {
        return Err(ApiError(
            StatusCode::BAD_REQUEST,
            ReplyError::new(ErrorCode::BadRequest, "message text is empty", Some("text")),
        ));
    }
    let session = id.clone();
    let reply = tokio::task::spawn_blocking(move || planner.post_message(&session, &body.text))
        .await
        .map_err(internal)?
        .ok_or_else(|| unknown_session(&id))?;
    let status = match &reply.error {
        Some(e) if e.code == ErrorCode::ServiceDegraded => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::OK,
    };
    Ok((status, Json(reply)).into_response())
}

async fn history(
    State(planner): State<Arc<Planner>>,
    Path(id): Path<String>,
) -> Result<Response, ApiError> {
    let turns = planner.history(&id).ok_or_else(|| unknown_session(&id))?;
    Ok(Json(turns).into_response())
}

async fn datasets(State(planner): State<Arc<Planner>>) -> impl IntoResponse {
    Json(planner.store().list_datasets())
}

async fn solve(
    State(planner): State<Arc<Planner>>,
    body: Result<Json<SolveRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(request) = body.map_err(bad_request)?;
    let output = tokio::task::spawn_blocking(move || planner.solve_direct(&request))
        .await
        .map_err(internal)?
        .map_err(|e| ApiError(StatusCode::BAD_REQUEST, e))?;
    Ok(Json(output.result).into_response())
}

pub fn router(planner: Arc<Planner>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/sessions/{id}/history", get(history))
        .route("/v1/datasets", get(datasets))
        .route("/v1/solve", post(solve))
        .with_state(planner)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    planner: Arc<Planner>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(planner))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and returns the listener with the port actually bound.
pub async fn bind(addr: SocketAddr) -> std::io::Result<(TcpListener, SocketAddr)> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

//! HTTP+JSON front end for the study service.
//!
//! | method | path                      | body / query          | response            |
//! |--------|---------------------------|-----------------------|---------------------|
//! | POST   | `/sessions`               | `CreateRequest`       | `SessionView`       |
//! | GET    | `/sessions/{id}`          |                       | `SessionView`       |
//! | POST   | `/sessions/{id}/advance`  |                       | `SessionView`       |
//! | GET    | `/sessions/{id}/next`     |                       | `ProblemView`       |
//! | POST   | `/sessions/{id}/submit`   | `SubmitRequest`       | `SubmitResponse`    |
//! | POST   | `/sessions/{id}/finalize` |                       | `PaymentSummary`    |
//! | POST   | `/sessions/{id}/exclude`  | `ExcludeRequest`      | `SessionView`       |
//! | GET    | `/export`                 | `ExportQuery`         | NDJSON trial lines  |
//!
//! Errors come back as `{"error": code, "message": text}`.

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use collab_core::study::{
    write_ndjson, Assignment, Bonus, ExportFilter, MlArm, StudyService, SubmitRequest, TrialPhase,
};
use collab_core::Error;
use serde::{Deserialize, Serialize};

pub const NDJSON: &str = "application/x-ndjson";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateRequest {
    #[serde(default = "random_assignment")]
    pub assignment: Assignment,
    /// Omitted seeds are drawn from the wall clock.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn random_assignment() -> Assignment {
    Assignment::Random
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExcludeRequest {
    pub reason: String,
}

/// `phase` is `practice`, `main` (default) or `all`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExportQuery {
    pub arm: Option<MlArm>,
    pub bonus: Option<Bonus>,
    pub phase: Option<String>,
    #[serde(default)]
    pub include_excluded: bool,
    pub completed_only: Option<bool>,
}

impl ExportQuery {
    pub fn filter(&self) -> Result<ExportFilter, ApiError> {
        let phase = match self.phase.as_deref() {
            None | Some("main") => Some(TrialPhase::Main),
            Some("practice") => Some(TrialPhase::Practice),
            Some("all") => None,
            Some(other) => return Err(Error::Parameter(format!("unknown phase {other:?}")).into()),
        };
        Ok(ExportFilter {
            arm: self.arm,
            bonus: self.bonus,
            phase,
            include_excluded: self.include_excluded,
            completed_only: self.completed_only.unwrap_or(true),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError(pub Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &Error) -> (StatusCode, &'static str) {
    match e {
        Error::UnknownSession(_) => (StatusCode::UNAUTHORIZED, "unknown_session"),
        Error::Phase(_) => (StatusCode::CONFLICT, "phase"),
        Error::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
        Error::Infeasible { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "infeasible"),
        Error::Shape { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "shape"),
        Error::Parameter(_) | Error::Parse(_) => (StatusCode::BAD_REQUEST, "bad_request"),
        Error::Data(_) => (StatusCode::NOT_FOUND, "no_data"),
        Error::Persistence(_) => (StatusCode::INTERNAL_SERVER_ERROR, "persistence"),
        _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = status_of(&self.0);
        let body = ErrorBody {
            error: code.to_string(),
            message: self.0.to_string(),
        };
        (status, Json(body)).into_response()
    }
}

type Shared = Arc<StudyService>;
type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T, F>(svc: Shared, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&StudyService) -> collab_core::Result<T> + Send + 'static,
{
    tokio::task::spawn_blocking(move || f(&svc))
        .await
        .map_err(|e| ApiError(Error::Data(format!("worker failed: {e}"))))?
        .map_err(ApiError)
}

fn clock_seed() -> u64 {
    let d = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .unwrap_or_default();
    d.as_secs().wrapping_mul(1_000_000_007) ^ u64::from(d.subsec_nanos())
}

async fn create(State(svc): State<Shared>, Json(req): Json<CreateRequest>) -> ApiResult<impl Serialize> {
    let seed = req.seed.unwrap_or_else(clock_seed);
    blocking(svc, move |s| s.create_session(req.assignment, seed)).await.map(Json)
}

async fn show(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    let rec = svc.session(&id)?;
    Ok(Json(collab_core::study::SessionView::from(&rec)))
}

async fn advance(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(svc, move |s| s.advance(&id)).await.map(Json)
}

async fn next(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(svc, move |s| s.next_problem(&id)).await.map(Json)
}

async fn submit(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<SubmitRequest>,
) -> ApiResult<impl Serialize> {
    blocking(svc, move |s| s.submit_solution(&id, &req)).await.map(Json)
}

async fn finalize(State(svc): State<Shared>, Path(id): Path<String>) -> ApiResult<impl Serialize> {
    blocking(svc, move |s| s.finalize(&id)).await.map(Json)
}

async fn exclude(
    State(svc): State<Shared>,
    Path(id): Path<String>,
    Json(req): Json<ExcludeRequest>,
) -> ApiResult<impl Serialize> {
    blocking(svc, move |s| s.exclude(&id, &req.reason)).await.map(Json)
}

async fn export(State(svc): State<Shared>, Query(q): Query<ExportQuery>) -> Result<Response, ApiError> {
    let filter = q.filter()?;
    let trials = blocking(svc, move |s| s.export_trials(&filter)).await?;
    let mut body = Vec::new();
    write_ndjson(&mut body, &trials)?;
    Ok(([(header::CONTENT_TYPE, NDJSON)], body).into_response())
}

pub fn router(service: Arc<StudyService>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(show))
        .route("/sessions/{id}/advance", post(advance))
        .route("/sessions/{id}/next", get(next))
        .route("/sessions/{id}/submit", post(submit))
        .route("/sessions/{id}/finalize", post(finalize))
        .route("/sessions/{id}/exclude", post(exclude))
        .route("/export", get(export))
        .with_state(service)
}

/// Serves until ctrl-c, auto-submitting expired problems every `sweep`.
pub async fn serve(service: Arc<StudyService>, addr: SocketAddr, sweep: Duration) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    let sweeper = {
        let svc = Arc::clone(&service);
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(sweep);
            loop {
                tick.tick().await;
                let svc = Arc::clone(&svc);
                let _ = tokio::task::spawn_blocking(move || svc.sweep_expired()).await;
            }
        })
    };
    let result = axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    sweeper.abort();
    result
}

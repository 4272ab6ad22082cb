//! HTTP/JSON service: the annotation study API, the bench operations
//! (MOS, correlation report, leaderboard, split) and an in-process mock of
//! the generation and feature model endpoints.

pub mod clock;
pub mod study;

use std::sync::Arc;

use axum::extract::rejection::QueryRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use icbench_core::api::{self, ApiError, ErrorKind};
use icbench_core::gateway::MockBackend;
use icbench_core::gateway::wire::{self, FeaturesRequest, GenerateRequest};
use icbench_core::gateway::GatewayError;
use serde::de::DeserializeOwned;
use serde::Deserialize;

pub use study::{Study, StudyConfig, StudyError};

#[derive(Clone, Default)]
pub struct AppState {
    pub study: Option<Arc<Study>>,
    pub models: Option<Arc<MockBackend>>,
}

impl AppState {
    pub fn with_study(mut self, study: Study) -> Self {
        self.study = Some(Arc::new(study));
        self
    }

    pub fn with_mock_models(mut self, backend: MockBackend) -> Self {
        self.models = Some(Arc::new(backend));
        self
    }
}

/// Error response: a status code and an [`ApiError`] body.
#[derive(Debug)]
pub struct Failure(StatusCode, ApiError);

impl Failure {
    fn new(kind: ErrorKind, error: impl Into<String>) -> Self {
        let status = match kind {
            ErrorKind::Validation => StatusCode::BAD_REQUEST,
            ErrorKind::Session => StatusCode::UNAUTHORIZED,
            ErrorKind::NotFound => StatusCode::NOT_FOUND,
            ErrorKind::Conflict => StatusCode::CONFLICT,
            ErrorKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self(status, ApiError { kind, error: error.into() })
    }

    fn validation(error: impl ToString) -> Self {
        Self::new(ErrorKind::Validation, error.to_string())
    }
}

impl IntoResponse for Failure {
    fn into_response(self) -> Response {
        if self.0.is_server_error() {
            tracing::error!(error = %self.1.error, "request failed");
        }
        (self.0, Json(self.1)).into_response()
    }
}

impl From<StudyError> for Failure {
    fn from(e: StudyError) -> Self {
        let kind = match &e {
            StudyError::Validation(_) => ErrorKind::Validation,
            StudyError::Session(_) => ErrorKind::Session,
            StudyError::NotFound(_) => ErrorKind::NotFound,
            StudyError::Conflict(_) => ErrorKind::Conflict,
            StudyError::Journal(_) => ErrorKind::Internal,
        };
        Self::new(kind, e.to_string())
    }
}

/// `Json` whose rejections come back as 400 with an [`ApiError`] body.
pub struct Body<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = Failure;

    async fn from_request(req: Request, state: &S) -> Result<Self, Failure> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| Body(v))
            .map_err(|r| Failure::validation(r.body_text()))
    }
}

type Reply<T> = Result<T, Failure>;

pub fn router(state: AppState) -> Router {
    Router::new()
        .route(api::HEALTH_PATH, get(|| async { "ok" }))
        .route(api::SESSIONS_PATH, post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/close", post(close_session))
        .route(api::QUALIFICATION_PATH, post(qualify))
        .route(api::NEXT_TASK_PATH, get(next_task))
        .route(api::RATINGS_PATH, post(submit_rating))
        .route(api::EXPORT_PATH, get(export))
        .route(api::PROGRESS_PATH, get(progress))
        .route(api::MOS_PATH, post(mos))
        .route(api::REPORT_PATH, post(report))
        .route(api::LEADERBOARD_PATH, post(leaderboard))
        .route(api::SPLIT_PATH, post(split))
        .route(wire::GENERATE_PATH, post(generate))
        .route(wire::FEATURES_PATH, post(features))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

fn study(state: &AppState) -> Reply<Arc<Study>> {
    state
        .study
        .clone()
        .ok_or_else(|| Failure::new(ErrorKind::NotFound, "this server has no annotation study loaded"))
}

/// Journal writes sync to disk, so keep them off the async workers.
async fn blocking<T: Send + 'static>(
    state: &AppState,
    f: impl FnOnce(&Study) -> Result<T, StudyError> + Send + 'static,
) -> Reply<T> {
    let s = study(state)?;
    tokio::task::spawn_blocking(move || f(&s))
        .await
        .map_err(|e| Failure::new(ErrorKind::Internal, e.to_string()))?
        .map_err(Failure::from)
}

async fn create_session(State(st): State<AppState>, Body(req): Body<api::CreateSession>) -> Reply<impl IntoResponse> {
    let info = blocking(&st, move |s| s.create_session(&req.subject_id)).await?;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn get_session(State(st): State<AppState>, Path(id): Path<String>) -> Reply<Json<api::SessionInfo>> {
    Ok(Json(study(&st)?.session(&id)?))
}

async fn close_session(State(st): State<AppState>, Path(id): Path<String>) -> Reply<Json<api::SessionInfo>> {
    Ok(Json(blocking(&st, move |s| s.close_session(&id)).await?))
}

async fn qualify(
    State(st): State<AppState>,
    Body(req): Body<api::QualificationRequest>,
) -> Reply<Json<api::QualificationResult>> {
    Ok(Json(blocking(&st, move |s| s.qualify(&req.session_id, &req.answers)).await?))
}

#[derive(Deserialize)]
struct NextQuery {
    session_id: String,
}

async fn next_task(
    State(st): State<AppState>,
    q: Result<Query<NextQuery>, QueryRejection>,
) -> Reply<Response> {
    let Query(q) = q.map_err(|r| Failure::validation(r.body_text()))?;
    Ok(match blocking(&st, move |s| s.next_task(&q.session_id)).await? {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn submit_rating(State(st): State<AppState>, Body(req): Body<api::RatingSubmission>) -> Reply<impl IntoResponse> {
    let rec = blocking(&st, move |s| s.submit(&req)).await?;
    Ok((StatusCode::CREATED, Json(rec)))
}

async fn export(State(st): State<AppState>) -> Reply<impl IntoResponse> {
    let body = icbench_core::jsonl::to_string(&study(&st)?.export());
    Ok(([(header::CONTENT_TYPE, "application/x-ndjson")], body))
}

async fn progress(State(st): State<AppState>) -> Reply<Json<api::Progress>> {
    Ok(Json(study(&st)?.progress()))
}

async fn mos(Body(req): Body<api::MosRequest>) -> Reply<Json<icbench_core::subjective::MosOutput>> {
    let out = tokio::task::spawn_blocking(move || icbench_core::subjective::mos_pipeline(&req.ratings))
        .await
        .map_err(|e| Failure::new(ErrorKind::Internal, e.to_string()))?;
    out.map(Json).map_err(Failure::validation)
}

async fn report(Body(req): Body<api::ReportRequest>) -> Reply<Json<api::ReportResponse>> {
    req.run().map(Json).map_err(Failure::validation)
}

async fn leaderboard(Body(req): Body<api::LeaderboardRequest>) -> Reply<Json<api::LeaderboardResponse>> {
    req.run().map(Json).map_err(Failure::validation)
}

async fn split(Body(req): Body<api::SplitRequest>) -> Reply<Json<icbench_core::dataset::SplitPlan>> {
    icbench_core::dataset::split_dataset(&req.captions, req.ratios, req.seed)
        .map(Json)
        .map_err(Failure::validation)
}

fn models(state: &AppState) -> Reply<Arc<MockBackend>> {
    state
        .models
        .clone()
        .ok_or_else(|| Failure::new(ErrorKind::NotFound, "mock model endpoints are disabled"))
}

fn gateway_failure(e: GatewayError) -> Failure {
    match e {
        GatewayError::Validation(m) => Failure::validation(m),
        other => Failure::new(ErrorKind::Internal, other.to_string()),
    }
}

async fn generate(State(st): State<AppState>, Body(req): Body<GenerateRequest>) -> Reply<Json<wire::GenerateResponse>> {
    if req.caption.trim().is_empty() {
        return Err(Failure::validation("caption must not be empty"));
    }
    Ok(Json(models(&st)?.handle_generate(&req.caption)))
}

async fn features(State(st): State<AppState>, Body(req): Body<FeaturesRequest>) -> Reply<Json<wire::FeaturesResponse>> {
    models(&st)?.handle_features(&req).map(Json).map_err(gateway_failure)
}

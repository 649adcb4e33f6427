use std::path::PathBuf;
use std::sync::Arc;

use allocrisk::allocator::{OptimizerConfig, SearchMode};
use allocrisk::model::{Allocation, CovariateMatrix};
use allocrisk::risk::{FlatLimit, RiskBreakdown};
use allocrisk::sequential::{open_session, BatchRequest, PosteriorScalars, SequentialSession, SessionSnapshot};
use allocrisk::PriorSpec;
use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use nalgebra::DVector;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

use crate::error::ApiError;
use crate::store::{SessionRecord, SessionStore};

#[derive(Clone)]
pub struct AppState {
    pub store: Arc<SessionStore>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    pub prior: PriorSpec,
    pub p: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub revision: u64,
    pub created_at: DateTime<Utc>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Quota {
    pub control: usize,
    pub treatment: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchBody {
    pub covariates: Vec<Vec<f64>>,
    #[serde(default)]
    pub quota: Option<Quota>,
    pub expected_revision: u64,
    #[serde(default)]
    pub mode: Option<SearchMode>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    /// Compute the allocation without committing it.
    #[serde(default)]
    pub dry_run: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchResponse {
    pub session_id: String,
    /// Index of the committed batch; absent for a dry run.
    pub batch_index: Option<usize>,
    pub allocation: Allocation,
    /// `"C"` or `"T"` per submitted row, in order.
    pub arms: Vec<String>,
    /// `null` while a flat prior leaves the treatment contrast unidentified;
    /// `flat_limit` then says how far from identified the design is.
    pub risk: Option<RiskBreakdown>,
    pub flat_limit: Option<FlatLimit>,
    pub revision: u64,
    pub l_c: usize,
    pub l_t: usize,
    pub dry_run: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomesBody {
    pub batch: usize,
    pub y: Vec<f64>,
    pub expected_revision: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutcomesResponse {
    pub session_id: String,
    pub revision: u64,
    pub e_sigma2: f64,
    pub posterior_scalars: PosteriorScalars,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchView {
    pub index: usize,
    pub size: usize,
    pub n_c: usize,
    pub n_t: usize,
    pub allocation: Allocation,
    pub risk: Option<RiskBreakdown>,
    pub flat_limit: Option<FlatLimit>,
    pub scored: bool,
}

/// Risk of one more unit at the current covariate mean, per arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WhatIf {
    pub control: Option<RiskBreakdown>,
    pub treatment: Option<RiskBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub created_at: DateTime<Utc>,
    pub revision: u64,
    pub p: usize,
    pub l_c: usize,
    pub l_t: usize,
    pub e_sigma2: f64,
    pub posterior_scalars: PosteriorScalars,
    pub batches: Vec<BatchView>,
    pub what_if: WhatIf,
    pub state: SessionSnapshot,
}

impl SessionView {
    fn build(record: &SessionRecord, session: &SequentialSession) -> Self {
        let (l_c, l_t) = session.arm_counts();
        let (control, treatment) = session.what_if();
        let batches = session
            .history()
            .iter()
            .enumerate()
            .map(|(index, b)| BatchView {
                index,
                size: b.allocation.len(),
                n_c: b.allocation.n_c(),
                n_t: b.allocation.n_t(),
                allocation: b.allocation.clone(),
                risk: b.risk.clone(),
                flat_limit: b.flat_limit,
                scored: b.outcomes.is_some(),
            })
            .collect();
        Self {
            session_id: record.session_id.clone(),
            created_at: record.created_at,
            revision: record.revision,
            p: session.p(),
            l_c,
            l_t,
            e_sigma2: session.expected_sigma2(),
            posterior_scalars: record.state.posterior_scalars,
            batches,
            what_if: WhatIf { control, treatment },
            state: record.state.clone(),
        }
    }
}

pub fn router(state: AppState, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/sessions", post(create_handler))
        .route("/sessions/{id}", get(get_handler))
        .route("/sessions/{id}/batches", post(batch_handler))
        .route("/sessions/{id}/outcomes", post(outcomes_handler))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::parse(e.to_string()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

/// Operations behind each route, callable without HTTP. The CLI uses these
/// to drive a session directory directly.
pub fn create_session(store: &SessionStore, req: &CreateSessionRequest) -> Result<CreateSessionResponse, ApiError> {
    let prior = req
        .prior
        .to_prior(req.p)
        .map_err(|e| ApiError::engine(StatusCode::BAD_REQUEST, &e))?;
    let session = open_session(&prior, req.p).map_err(|e| ApiError::engine(StatusCode::BAD_REQUEST, &e))?;
    let record = store.create(&session)?;
    Ok(CreateSessionResponse {
        session_id: record.session_id,
        revision: record.revision,
        created_at: record.created_at,
    })
}

pub fn view_session(store: &SessionStore, id: &str) -> Result<SessionView, ApiError> {
    let record = store.load(id)?;
    let session = record.session()?;
    Ok(SessionView::build(&record, &session))
}

pub fn submit_batch(store: &SessionStore, id: &str, body: &BatchBody) -> Result<BatchResponse, ApiError> {
    if body.dry_run {
        let record = store.load(id)?;
        if record.revision != body.expected_revision {
            return Err(ApiError::conflict(body.expected_revision, record.revision));
        }
        let session = record.session()?;
        let req = batch_request(body, session.p())?;
        let (d, _) = session.allocate_batch(&req).map_err(unprocessable)?;
        let (l_c, l_t) = session.arm_counts();
        return Ok(BatchResponse {
            session_id: record.session_id,
            batch_index: None,
            arms: arms(&d.allocation),
            allocation: d.allocation,
            risk: d.risk,
            flat_limit: d.flat_limit,
            revision: record.revision,
            l_c,
            l_t,
            dry_run: true,
        });
    }
    let (record, (d, index, (l_c, l_t))) = store.update(id, body.expected_revision, |session| {
        let req = batch_request(body, session.p())?;
        let (d, next) = session.allocate_batch(&req).map_err(unprocessable)?;
        let index = next.history().len() - 1;
        let counts = next.arm_counts();
        Ok((next, (d, index, counts)))
    })?;
    Ok(BatchResponse {
        session_id: record.session_id,
        batch_index: Some(index),
        arms: arms(&d.allocation),
        allocation: d.allocation,
        risk: d.risk,
        flat_limit: d.flat_limit,
        revision: record.revision,
        l_c,
        l_t,
        dry_run: false,
    })
}

pub fn record_outcomes(store: &SessionStore, id: &str, body: &OutcomesBody) -> Result<OutcomesResponse, ApiError> {
    let (record, e_sigma2) = store.update(id, body.expected_revision, |session| {
        let next = session
            .record_outcomes(body.batch, &DVector::from_column_slice(&body.y))
            .map_err(unprocessable)?;
        let e = next.expected_sigma2();
        Ok((next, e))
    })?;
    Ok(OutcomesResponse {
        session_id: record.session_id,
        revision: record.revision,
        e_sigma2,
        posterior_scalars: record.state.posterior_scalars,
    })
}

async fn create_handler(
    State(app): State<AppState>,
    body: Bytes,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let req: CreateSessionRequest = parse(&body)?;
    let created = blocking(move || create_session(&app.store, &req)).await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn get_handler(State(app): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    Ok(Json(blocking(move || view_session(&app.store, &id)).await?))
}

async fn batch_handler(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<BatchResponse>, ApiError> {
    let body: BatchBody = parse(&body)?;
    Ok(Json(blocking(move || submit_batch(&app.store, &id, &body)).await?))
}

async fn outcomes_handler(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<OutcomesResponse>, ApiError> {
    let body: OutcomesBody = parse(&body)?;
    Ok(Json(blocking(move || record_outcomes(&app.store, &id, &body)).await?))
}

fn unprocessable(e: allocrisk::AllocError) -> ApiError {
    ApiError::engine(StatusCode::UNPROCESSABLE_ENTITY, &e)
}

fn batch_request(body: &BatchBody, p: usize) -> Result<BatchRequest, ApiError> {
    if body.covariates.is_empty() {
        return Err(unprocessable(allocrisk::AllocError::InvalidInput("batch has no units".into())));
    }
    let u = CovariateMatrix::from_rows(&body.covariates).map_err(unprocessable)?;
    if u.p() != p {
        return Err(unprocessable(allocrisk::AllocError::DimensionMismatch(format!(
            "batch has p = {} but the session has p = {p}",
            u.p()
        ))));
    }
    let mut req = BatchRequest::new(u);
    if let Some(cfg) = &body.optimizer {
        req.optimizer = cfg.clone();
        req.mode = Some(cfg.mode);
    }
    if body.mode.is_some() {
        req.mode = body.mode;
    }
    if let Some(q) = body.quota {
        req = req.with_quota(q.control, q.treatment);
    }
    Ok(req)
}

fn arms(w: &Allocation) -> Vec<String> {
    w.as_slice()
        .iter()
        .map(|&v| if v == 1 { "T" } else { "C" }.to_string())
        .collect()
}

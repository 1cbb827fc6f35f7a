//! HTTP interface over a directory of sessions.
//!
//! Every response carries `x-spurscope-schema`. Errors are JSON objects of
//! the form `{"error": {"code": "...", "message": "..."}}`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path as FsPath, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::rejection::{JsonRejection, PathRejection, QueryRejection};
use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use spurscope::data::load_dataset;
use spurscope::model::{FcnConfig, FcnModel, TrainConfig};
use spurscope::oracle::Target;
use spurscope::pipeline::AnalysisConfig;
use spurscope::spuriousness::Verdict;

use crate::session::{
    validate_session_id, JobRecord, JobStatus, MetricsEntry, RetrainRequest, Session, SessionError, SessionSummary,
    SortKey, SCHEMA_VERSION,
};

pub const SCHEMA_HEADER: &str = "x-spurscope-schema";

/// Error wrapper that renders as a JSON error body.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_request", message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let (status, code) = match &e {
            SessionError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            SessionError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            SessionError::Missing { .. } => (StatusCode::CONFLICT, "not_ready"),
            _ if e.is_validation() => (StatusCode::BAD_REQUEST, "invalid_request"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<spurscope::Error> for ApiError {
    fn from(e: spurscope::Error) -> Self {
        SessionError::from(e).into()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl From<PathRejection> for ApiError {
    fn from(e: PathRejection) -> Self {
        ApiError::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "error": { "code": self.code, "message": self.message } });
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;
type Shared = Arc<Mutex<Session>>;

/// Sessions live in subdirectories of `root`, one per id.
pub struct AppState {
    root: PathBuf,
    sessions: Mutex<BTreeMap<String, Shared>>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // A panic inside a handler must not wedge the session for good.
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl AppState {
    /// Loads every session already stored under `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, SessionError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|source| SessionError::Io {
            path: root.clone(),
            source,
        })?;
        let mut sessions = BTreeMap::new();
        let entries = std::fs::read_dir(&root).map_err(|source| SessionError::Io {
            path: root.clone(),
            source,
        })?;
        for entry in entries.flatten() {
            let dir = entry.path();
            if !dir.join("session.json").exists() {
                continue;
            }
            let s = Session::open(&dir)?;
            sessions.insert(s.id().to_string(), Arc::new(Mutex::new(s)));
        }
        Ok(AppState {
            root,
            sessions: Mutex::new(sessions),
        })
    }

    pub fn root(&self) -> &FsPath {
        &self.root
    }

    fn get(&self, id: &str) -> ApiResult<Shared> {
        lock(&self.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(format!("session `{id}`")).into())
    }

    fn fresh_id(&self) -> String {
        let sessions = lock(&self.sessions);
        (1..)
            .map(|n| format!("s{n}"))
            .find(|id| !sessions.contains_key(id) && !self.root.join(id).exists())
            .expect("unbounded id space")
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(session_summary))
        .route("/sessions/{id}/clusters", get(clusters))
        .route("/sessions/{id}/clusters/{cid}/instances", get(instances))
        .route("/sessions/{id}/embedding", get(embedding))
        .route("/sessions/{id}/annotations", post(annotate).get(annotations))
        .route("/sessions/{id}/retrain", post(retrain))
        .route("/sessions/{id}/jobs/current", get(current_job))
        .route("/sessions/{id}/metrics", get(metrics))
        .layer(middleware::from_fn(schema_header))
        .with_state(state)
}

/// Rejects requests pinned to another schema and stamps every response.
async fn schema_header(req: Request, next: Next) -> Response {
    let expected = SCHEMA_VERSION.to_string();
    let mismatch = req
        .headers()
        .get(SCHEMA_HEADER)
        .is_some_and(|v| v.to_str().map_or(true, |v| v.trim() != expected));
    let mut resp = if mismatch {
        ApiError::bad_request(format!("unsupported schema version; this server speaks {SCHEMA_VERSION}"))
            .into_response()
    } else {
        next.run(req).await
    };
    resp.headers_mut()
        .insert(SCHEMA_HEADER, HeaderValue::from_str(&expected).expect("ascii digits"));
    resp
}

/// Runs `f` on the blocking pool.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSessionRequest {
    #[serde(default)]
    pub session_id: Option<String>,
    /// Raw JSONL dataset; it is z-scored with its train-split statistics.
    pub dataset_path: PathBuf,
    /// Existing checkpoint; when absent a model is trained.
    #[serde(default)]
    pub checkpoint_path: Option<PathBuf>,
    #[serde(default)]
    pub model: Option<FcnConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub k_max: Option<usize>,
    #[serde(default)]
    pub dtw_window: Option<usize>,
}

impl CreateSessionRequest {
    fn analysis_config(&self, seed: u64) -> AnalysisConfig {
        let d = AnalysisConfig::default();
        AnalysisConfig {
            alpha: self.alpha.unwrap_or(d.alpha),
            k_max: self.k_max.unwrap_or(d.k_max),
            k: self.k,
            dtw_window: self.dtw_window,
            seed: spurscope::seed::derive(seed, "analysis"),
            ..d
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreatedSession {
    pub session: SessionSummary,
    pub metrics: Vec<MetricsEntry>,
}

fn build_session(root: &FsPath, id: &str, req: &CreateSessionRequest) -> ApiResult<Session> {
    let seed = req.seed.unwrap_or(0);
    let acfg = req.analysis_config(seed);
    acfg.validate()?;
    let raw = load_dataset(&req.dataset_path)?;
    let mut s = Session::create(root.join(id), id, seed)?;
    s.set_dataset(&raw)?;
    match &req.checkpoint_path {
        Some(path) => s.load_model(FcnModel::load(path)?)?,
        None => {
            let cfg = req.model.clone().unwrap_or_else(|| FcnConfig::small(raw.channels(), seed));
            let tc = req.train.clone().unwrap_or_else(|| TrainConfig {
                seed: spurscope::seed::derive(seed, "train"),
                ..TrainConfig::default()
            });
            s.train(&cfg, &tc)?;
        }
    }
    s.analyze(&acfg)?;
    Ok(s)
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Result<Json<CreateSessionRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<CreatedSession>)> {
    let Json(req) = body?;
    let id = match &req.session_id {
        Some(id) => {
            validate_session_id(id)?;
            if lock(&state.sessions).contains_key(id) {
                return Err(SessionError::Conflict(format!("session `{id}` already exists")).into());
            }
            id.clone()
        }
        None => state.fresh_id(),
    };
    let root = state.root.clone();
    let built_id = id.clone();
    let session = blocking(move || {
        let dir = root.join(&built_id);
        let existed = dir.exists();
        let out = build_session(&root, &built_id, &req);
        if out.is_err() && !existed {
            let _ = std::fs::remove_dir_all(&dir);
        }
        out
    })
    .await?;
    let created = CreatedSession {
        session: session.summary(),
        metrics: session.metrics.clone(),
    };
    let mut sessions = lock(&state.sessions);
    if sessions.contains_key(&id) {
        return Err(SessionError::Conflict(format!("session `{id}` already exists")).into());
    }
    sessions.insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(created)))
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> Json<Vec<SessionSummary>> {
    let shared: Vec<Shared> = lock(&state.sessions).values().cloned().collect();
    Json(shared.iter().map(|s| lock(s).summary()).collect())
}

async fn session_summary(
    State(state): State<Arc<AppState>>,
    path: Result<Path<String>, PathRejection>,
) -> ApiResult<Json<SessionSummary>> {
    let Path(id) = path?;
    let shared = state.get(&id)?;
    let view = lock(&shared).summary();
    Ok(Json(view))
}

#[derive(Debug, Deserialize)]
struct ClusterQuery {
    sort: Option<String>,
}

async fn clusters(
    State(state): State<Arc<AppState>>,
    path: Result<Path<String>, PathRejection>,
    query: Result<Query<ClusterQuery>, QueryRejection>,
) -> ApiResult<impl IntoResponse> {
    let Path(id) = path?;
    let Query(q) = query?;
    let sort: SortKey = q.sort.as_deref().unwrap_or("accuracy").parse()?;
    let shared = state.get(&id)?;
    let view = lock(&shared).clusters_view(sort)?;
    Ok(Json(view))
}

async fn instances(
    State(state): State<Arc<AppState>>,
    path: Result<Path<(String, usize)>, PathRejection>,
) -> ApiResult<impl IntoResponse> {
    let Path((id, cid)) = path?;
    let shared = state.get(&id)?;
    let view = lock(&shared).instances_view(cid)?;
    Ok(Json(view))
}

async fn embedding(
    State(state): State<Arc<AppState>>,
    path: Result<Path<String>, PathRejection>,
) -> ApiResult<impl IntoResponse> {
    let Path(id) = path?;
    let shared = state.get(&id)?;
    let view = lock(&shared).embedding_view()?;
    Ok(Json(view))
}

/// `{"target": "cluster", "id": 3, "label": "spurious"}` or
/// `{"target": "instance", "id": "x17", "label": "correct"}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRequest {
    #[serde(flatten)]
    pub target: Target,
    pub label: Verdict,
}

async fn annotate(
    State(state): State<Arc<AppState>>,
    path: Result<Path<String>, PathRejection>,
    body: Result<Json<AnnotationRequest>, JsonRejection>,
) -> ApiResult<impl IntoResponse> {
    let Path(id) = path?;
    let Json(req) = body?;
    let shared = state.get(&id)?;
    let view = lock(&shared).annotate(&req.target, req.label)?;
    Ok(Json(view))
}

async fn annotations(
    State(state): State<Arc<AppState>>,
    path: Result<Path<String>, PathRejection>,
) -> ApiResult<impl IntoResponse> {
    let Path(id) = path?;
    let shared = state.get(&id)?;
    let view = lock(&shared).annotation_view()?;
    Ok(Json(view))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobAccepted {
    pub job_id: u64,
    pub status: JobStatus,
}

async fn retrain(
    State(state): State<Arc<AppState>>,
    path: Result<Path<String>, PathRejection>,
    body: Option<Json<RetrainRequest>>,
) -> ApiResult<(StatusCode, Json<JobAccepted>)> {
    let Path(id) = path?;
    let req = body.map(|Json(r)| r).unwrap_or_default();
    let shared = state.get(&id)?;
    let job = lock(&shared).begin_retrain(&req)?;
    let job_id = job.job_id;
    let worker = Arc::clone(&shared);
    tokio::task::spawn_blocking(move || {
        let outcome = job.run();
        // The record on disk is the only place a failure here can go.
        let _ = lock(&worker).finish_retrain(job.job_id, outcome);
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(JobAccepted {
            job_id,
            status: JobStatus::Retraining,
        }),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobView {
    pub session_id: String,
    pub status: JobStatus,
    pub job: Option<JobRecord>,
}

async fn current_job(
    State(state): State<Arc<AppState>>,
    path: Result<Path<String>, PathRejection>,
) -> ApiResult<Json<JobView>> {
    let Path(id) = path?;
    let shared = state.get(&id)?;
    let s = lock(&shared);
    Ok(Json(JobView {
        session_id: s.id().to_string(),
        status: s.meta.status,
        job: s.job.clone(),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsView {
    pub session_id: String,
    pub model_version: u32,
    pub history: Vec<MetricsEntry>,
}

async fn metrics(
    State(state): State<Arc<AppState>>,
    path: Result<Path<String>, PathRejection>,
) -> ApiResult<Json<MetricsView>> {
    let Path(id) = path?;
    let shared = state.get(&id)?;
    let s = lock(&shared);
    Ok(Json(MetricsView {
        session_id: s.id().to_string(),
        model_version: s.meta.model_version,
        history: s.metrics.clone(),
    }))
}

/// Serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

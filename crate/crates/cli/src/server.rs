//! HTTP service for edit jobs.
//!
//! | method | path                     | body                                  |
//! |--------|--------------------------|---------------------------------------|
//! | POST   | `/api/edit`              | [`EditPayload`] JSON → `{"id": ..}`   |
//! | GET    | `/api/jobs/{id}`         | [`JobView`] JSON                      |
//! | GET    | `/api/jobs/{id}/result`  | PNG once the job is done              |
//! | GET    | `/api/health`            | build and backend info                |
//!
//! Images travel as base64-encoded PNG or JPEG. Errors are JSON
//! `{"error": ..}` with status 400 (bad request), 404 (unknown job), 409
//! (result not ready) or 503 (backend unavailable).

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use anchor_edit::sampler::{run_edit_observed, StepEvent};
use anchor_edit::{
    Denoiser, EditKind, EditRequest, EditTransform, Error, Image, Mask, SamplerConfig,
    SamplerReport,
};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;

use crate::cli::{Failure, ServeArgs, EXIT_FAILED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Done,
    Failed,
}

/// Body of `POST /api/edit`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditPayload {
    /// Base64 PNG/JPEG source image.
    pub image: String,
    /// Base64 single-channel PNG, nonzero = object.
    pub mask: String,
    #[serde(default)]
    pub task: EditKind,
    #[serde(default)]
    pub dx: i64,
    #[serde(default)]
    pub dy: i64,
    #[serde(default = "unit")]
    pub scale: f64,
    #[serde(default)]
    pub reference: Option<String>,
    /// Partial sampler configuration merged over the server's.
    #[serde(default)]
    pub config: Option<serde_json::Value>,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize)]
pub struct RequestSummary {
    pub task: EditKind,
    pub dx: i64,
    pub dy: i64,
    pub scale: f64,
    pub height: usize,
    pub width: usize,
    pub steps: usize,
    pub seed: u64,
}

/// Job as returned by `GET /api/jobs/{id}`.
#[derive(Debug, Clone, Serialize)]
pub struct JobView {
    pub id: String,
    pub state: JobState,
    pub progress: f64,
    pub request: RequestSummary,
    /// Latest preview, base64 PNG.
    pub preview: Option<String>,
    pub preview_step: Option<usize>,
    pub report: Option<SamplerReport>,
    pub error: Option<String>,
}

struct Job {
    view: JobView,
    result: Option<Vec<u8>>,
}

pub struct AppState {
    backend: Result<Arc<dyn Denoiser>, String>,
    backend_id: String,
    base: SamplerConfig,
    jobs: Mutex<HashMap<String, Job>>,
    next_id: AtomicU64,
    workers: Arc<Semaphore>,
    max_jobs: usize,
    results_dir: Option<PathBuf>,
}

impl AppState {
    /// Opens the configured backend. A backend that fails to open is kept as
    /// an error; edit requests then get 503.
    pub fn new(base: SamplerConfig, max_jobs: usize, results_dir: Option<PathBuf>) -> Arc<Self> {
        let backend_id = base.backend.id().to_string();
        let backend = base.backend.instantiate().map_err(|e| e.to_string());
        if let Err(e) = &backend {
            log::warn!("backend {backend_id} unavailable: {e}");
        }
        Arc::new(Self {
            backend,
            backend_id,
            base,
            jobs: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            workers: Arc::new(Semaphore::new(max_jobs.max(1))),
            max_jobs: max_jobs.max(1),
            results_dir,
        })
    }

    fn update(&self, id: &str, f: impl FnOnce(&mut Job)) {
        if let Some(job) = self.jobs.lock().expect("job store poisoned").get_mut(id) {
            f(job);
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message })),
        )
            .into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/edit", post(submit))
        .route("/api/jobs/{id}", get(job))
        .route("/api/jobs/{id}/result", get(result))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let (available, detail) = match &state.backend {
        Ok(b) => (true, serde_json::to_value(b.info()).unwrap_or_default()),
        Err(e) => (false, serde_json::Value::String(e.clone())),
    };
    Json(serde_json::json!({
        "status": "ok",
        "version": env!("CARGO_PKG_VERSION"),
        "backend": state.backend_id,
        "backend_available": available,
        "backend_info": detail,
        "max_jobs": state.max_jobs,
        "steps": state.base.steps(),
    }))
}

fn decode_b64(field: &str, data: &str) -> Result<Vec<u8>, ApiError> {
    let data = data.split_once(";base64,").map_or(data, |(_, d)| d);
    B64.decode(data.trim())
        .map_err(|e| ApiError::bad_request(format!("{field}: invalid base64: {e}")))
}

/// Merges `overrides` into the JSON form of `base`.
fn merge(base: &mut serde_json::Value, overrides: &serde_json::Value) {
    match (base, overrides) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                merge(b.entry(k.clone()).or_insert(serde_json::Value::Null), v);
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn build_job(state: &AppState, p: &EditPayload) -> Result<(EditRequest, SamplerConfig), ApiError> {
    let bad = |e: Error| ApiError::bad_request(e.to_string());
    let source = Image::decode(&decode_b64("image", &p.image)?).map_err(bad)?;
    let mask = Mask::decode(&decode_b64("mask", &p.mask)?).map_err(bad)?;
    let reference = match &p.reference {
        Some(r) => Some(Image::decode(&decode_b64("reference", r)?).map_err(bad)?),
        None => None,
    };
    let transform =
        EditTransform::from_parts(p.task, p.dx, p.dy, p.scale, reference).map_err(bad)?;
    let mut cfg = state.base.clone();
    if let Some(o) = &p.config {
        let mut v = serde_json::to_value(&cfg).map_err(|e| ApiError::bad_request(e.to_string()))?;
        merge(&mut v, o);
        cfg =
            serde_json::from_value(v).map_err(|e| ApiError::bad_request(format!("config: {e}")))?;
        if cfg.backend != state.base.backend || cfg.debug_dump.is_some() {
            return Err(ApiError::bad_request(
                "config: backend and debug_dump are fixed by the server",
            ));
        }
    }
    cfg.validate().map_err(bad)?;
    let request = EditRequest::new(source, mask, transform);
    Ok((request, cfg))
}

async fn submit(
    State(state): State<Arc<AppState>>,
    Json(payload): Json<EditPayload>,
) -> Result<(StatusCode, Json<serde_json::Value>), ApiError> {
    let backend = state
        .backend
        .clone()
        .map_err(|e| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, e))?;
    let (request, cfg) = build_job(&state, &payload)?;
    request
        .validate(backend.info().latent_downscale)
        .and_then(|_| {
            anchor_edit::edit::derive_mask_set(&request.object_mask, &request.transform, None)
        })
        .map_err(|e| ApiError::bad_request(e.to_string()))?;

    let id = format!("job-{}", state.next_id.fetch_add(1, Ordering::SeqCst));
    let view = JobView {
        id: id.clone(),
        state: JobState::Queued,
        progress: 0.0,
        request: RequestSummary {
            task: payload.task,
            dx: payload.dx,
            dy: payload.dy,
            scale: payload.scale,
            height: request.source.height(),
            width: request.source.width(),
            steps: cfg.steps(),
            seed: cfg.seed,
        },
        preview: None,
        preview_step: None,
        report: None,
        error: None,
    };
    state
        .jobs
        .lock()
        .expect("job store poisoned")
        .insert(id.clone(), Job { view, result: None });

    let st = state.clone();
    let job_id = id.clone();
    tokio::spawn(async move {
        let Ok(_permit) = st.workers.clone().acquire_owned().await else {
            return;
        };
        st.update(&job_id, |j| j.view.state = JobState::Running);
        let worker = st.clone();
        let wid = job_id.clone();
        let outcome = tokio::task::spawn_blocking(move || {
            execute(&worker, &wid, &request, &cfg, backend.as_ref())
        })
        .await;
        let outcome = outcome.unwrap_or_else(|e| Err(format!("worker panicked: {e}")));
        match outcome {
            Ok((report, png)) => {
                if let Some(dir) = &st.results_dir {
                    persist(dir, &job_id, &report, &png);
                }
                st.update(&job_id, |j| {
                    j.view.state = JobState::Done;
                    j.view.progress = 1.0;
                    j.view.report = Some(report);
                    j.result = Some(png);
                });
            }
            Err(e) => {
                log::warn!("{job_id} failed: {e}");
                st.update(&job_id, |j| {
                    j.view.state = JobState::Failed;
                    j.view.error = Some(e);
                });
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "id": id }))))
}

fn execute(
    state: &AppState,
    id: &str,
    request: &EditRequest,
    cfg: &SamplerConfig,
    backend: &dyn Denoiser,
) -> Result<(SamplerReport, Vec<u8>), String> {
    let mut observer = |ev: &StepEvent<'_>| {
        let preview = ev
            .preview
            .and_then(|p| p.encode_png().ok())
            .map(|b| B64.encode(b));
        let progress = ev.done as f64 / ev.steps as f64;
        state.update(id, |j| {
            j.view.progress = progress;
            if preview.is_some() {
                j.view.preview = preview;
                j.view.preview_step = Some(ev.done);
            }
        });
    };
    let report =
        run_edit_observed(request, cfg, backend, &mut observer).map_err(|e| e.to_string())?;
    let png = report.output.encode_png().map_err(|e| e.to_string())?;
    Ok((report, png))
}

fn persist(dir: &std::path::Path, id: &str, report: &SamplerReport, png: &[u8]) {
    let job_dir = dir.join(id);
    let write = || -> std::io::Result<()> {
        std::fs::create_dir_all(&job_dir)?;
        std::fs::write(job_dir.join("output.png"), png)?;
        std::fs::write(
            job_dir.join("report.json"),
            serde_json::to_vec_pretty(report).unwrap_or_default(),
        )
    };
    if let Err(e) = write() {
        log::warn!("cannot persist {id} to {}: {e}", job_dir.display());
    }
}

async fn job(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<JobView>, ApiError> {
    let jobs = state.jobs.lock().expect("job store poisoned");
    jobs.get(&id)
        .map(|j| Json(j.view.clone()))
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")))
}

async fn result(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    let jobs = state.jobs.lock().expect("job store poisoned");
    match jobs.get(&id) {
        None => ApiError::new(StatusCode::NOT_FOUND, format!("unknown job {id}")).into_response(),
        Some(Job {
            result: Some(png), ..
        }) => ([(header::CONTENT_TYPE, "image/png")], png.clone()).into_response(),
        Some(j) => ApiError::new(
            StatusCode::CONFLICT,
            format!("job {id} is {:?}, no result", j.view.state),
        )
        .into_response(),
    }
}

/// Binds and serves until the process is stopped.
pub fn serve_blocking(args: &ServeArgs) -> Result<(), Failure> {
    let cfg = args.run.sampler_config()?;
    let state = AppState::new(cfg, args.max_jobs, args.results_dir.clone());
    let addr = format!("{}:{}", args.host, args.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure {
        code: EXIT_FAILED,
        message: e.to_string(),
    })?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, router(state)).await
    })
    .map_err(|e| Failure {
        code: EXIT_FAILED,
        message: e.to_string(),
    })
}

//! HTTP routes. Each mutation maps onto one pipeline operation; finetunes
//! and sweeps run as background jobs polled through `/api/jobs/{id}`.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Multipart, Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use forgedit::pipeline::{Manifest, NextAction, Outcome, Pipeline, SamplerSettings, StateValue, SweepRequest};
use forgedit::session::EditSession;
use forgedit::store::{ArtifactId, ArtifactKind};
use forgedit::types::{ImageTensor, Verdict};
use forgedit::Error;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::{ServeDir, ServeFile};

use crate::jobs::{JobBoard, JobKind, JobState, JobStatus};

#[derive(Clone)]
pub struct AppState {
    pub pipeline: Arc<Pipeline>,
    pub jobs: Arc<JobBoard>,
}

impl AppState {
    /// Job records live next to the artifact store.
    pub fn new(pipeline: Pipeline) -> anyhow::Result<Self> {
        let jobs = JobBoard::open(pipeline.store().root().join("jobs"))?;
        Ok(AppState { pipeline: Arc::new(pipeline), jobs: Arc::new(jobs) })
    }
}

pub struct ApiError(Error);

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            e if e.is_contract() => StatusCode::BAD_REQUEST,
            Error::Json(_) | Error::Image(_) => StatusCode::BAD_REQUEST,
            Error::NotFound(_) => StatusCode::NOT_FOUND,
            Error::State(_) => StatusCode::CONFLICT,
            Error::CaptionerUnavailable(_) => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        if status.is_server_error() {
            tracing::error!(error = %self.0, "request failed");
        }
        (status, Json(json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking pipeline work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> forgedit::Result<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Error::Sampling(format!("worker panicked: {e}")))?
        .map_err(ApiError)
}

pub fn router(state: AppState, webui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session).get(list_sessions))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/manifest", get(get_manifest))
        .route("/api/sessions/{id}/sweeps", post(start_sweep))
        .route("/api/sessions/{id}/verdict", post(post_verdict))
        .route("/api/jobs/{id}", get(get_job))
        .route("/api/images/{id}", get(get_image))
        .with_state(state);
    match webui_dir {
        Some(dir) if dir.is_dir() => {
            let index = dir.join("index.html");
            api.fallback_service(ServeDir::new(dir).fallback(ServeFile::new(index)))
        }
        _ => api,
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "ok": true }))
}

#[derive(Serialize)]
struct CreatedSession {
    #[serde(flatten)]
    session: EditSession,
    /// The finetune job, then the queued default sweep.
    jobs: Vec<String>,
}

async fn create_session(State(state): State<AppState>, mut form: Multipart) -> ApiResult<Response> {
    let (mut image, mut target, mut source) = (None, None, None);
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| Error::Contract(format!("bad multipart body: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_owned();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| Error::Contract(format!("bad multipart field {name}: {e}")))?;
        match name.as_str() {
            "image" => image = Some(bytes),
            "target_prompt" => target = Some(text_field(&name, &bytes)?),
            "source_prompt" => source = Some(text_field(&name, &bytes)?).filter(|s| !s.trim().is_empty()),
            _ => {}
        }
    }
    let image = image.ok_or_else(|| Error::Contract("missing image field".into()))?;
    let target = target.ok_or_else(|| Error::Contract("missing target_prompt field".into()))?;
    let image = ImageTensor::from_png(&image).map_err(|e| Error::Contract(format!("image is not a PNG: {e}")))?;

    let pipeline = state.pipeline.clone();
    let session = blocking(move || pipeline.begin_session(&image, &target, source.as_deref())).await?;
    let finetune = state.jobs.create(JobKind::Finetune, &session.id).map_err(internal)?;
    let sweep = state.jobs.create(JobKind::Sweep, &session.id).map_err(internal)?;

    let (id, finetune_id, sweep_id) = (session.id.clone(), finetune.job_id.clone(), sweep.job_id.clone());
    let bg = state.clone();
    tokio::task::spawn_blocking(move || {
        let steps = bg.pipeline.finetune_config().steps as f64;
        bg.jobs.update(&finetune_id, |j| {
            j.state = JobState::Running;
            j.message = "finetuning".into();
        });
        let result = bg.pipeline.finetune_session(&id, |p| {
            bg.jobs.update(&finetune_id, |j| {
                j.progress = (p.step + 1) as f64 / steps;
                j.message = format!("step {} loss {:.4}", p.step + 1, p.loss);
            })
        });
        match result {
            Ok(session) => {
                bg.jobs.update(&finetune_id, |j| {
                    j.state = JobState::Done;
                    j.message = "finetuned".into();
                });
                let action = session.state.last_recommendation.unwrap_or_else(NextAction::initial);
                run_sweep_job(&bg, &id, &sweep_id, &action, None);
            }
            Err(e) => {
                bg.jobs.update(&finetune_id, |j| fail(j, &e));
                bg.jobs.update(&sweep_id, |j| {
                    j.state = JobState::Failed;
                    j.message = "finetune failed".into();
                });
            }
        }
    });

    Ok((StatusCode::CREATED, Json(CreatedSession { session, jobs: vec![finetune.job_id, sweep.job_id] })).into_response())
}

fn text_field(name: &str, bytes: &Bytes) -> ApiResult<String> {
    String::from_utf8(bytes.to_vec())
        .map_err(|_| ApiError(Error::Contract(format!("field {name} is not UTF-8"))))
}

fn internal(e: anyhow::Error) -> ApiError {
    ApiError(Error::Io(std::io::Error::other(e.to_string())))
}

fn fail(job: &mut JobStatus, e: &Error) {
    job.state = JobState::Failed;
    job.message = e.to_string();
}

fn run_sweep_job(state: &AppState, session_id: &str, job_id: &str, action: &NextAction, settings: Option<SamplerSettings>) {
    state.jobs.update(job_id, |j| {
        j.state = JobState::Running;
        j.message = "sampling".into();
    });
    let result = state.pipeline.run_sweep(session_id, action, settings, |done, total| {
        state.jobs.update(job_id, |j| {
            j.progress = done as f64 / total as f64;
            j.message = format!("{done}/{total} images");
        })
    });
    match result {
        Ok(sweep) => state.jobs.update(job_id, |j| {
            j.state = JobState::Done;
            j.message = format!("{} images, {} failed", sweep.images.len(), sweep.failures.len());
            j.sweep_id = Some(sweep.id.clone());
        }),
        Err(e) => state.jobs.update(job_id, |j| fail(j, &e)),
    }
}

#[derive(Serialize)]
struct SessionSummary {
    id: String,
    state: StateValue,
    target_prompt: String,
    sweeps: usize,
    updated_at: String,
}

async fn list_sessions(State(state): State<AppState>) -> ApiResult<Json<Vec<SessionSummary>>> {
    let pipeline = state.pipeline.clone();
    let out = blocking(move || {
        let store = pipeline.store();
        let mut out = Vec::new();
        for id in store.list_sessions()? {
            let s = store.load_session(&id)?;
            out.push(SessionSummary {
                id: s.id,
                state: s.state.value,
                target_prompt: s.target_prompt.text().to_owned(),
                sweeps: s.sweeps.len(),
                updated_at: s.updated_at.to_rfc3339(),
            });
        }
        out.sort_by(|a, b| b.updated_at.cmp(&a.updated_at));
        Ok(out)
    })
    .await?;
    Ok(Json(out))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<EditSession>> {
    Ok(Json(state.pipeline.load_session(&id)?))
}

async fn get_manifest(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<Manifest>> {
    Ok(Json(Manifest::from_session(&state.pipeline.load_session(&id)?)))
}

#[derive(Debug, Default, Deserialize)]
struct SweepBody {
    #[serde(flatten)]
    request: SweepRequest,
    #[serde(default)]
    sampler: Option<SamplerSettings>,
}

async fn start_sweep(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<SweepBody>>,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let body = body.map(|Json(b)| b).unwrap_or_default();
    let session = state.pipeline.load_session(&id)?;
    if session.state.value != StateValue::AwaitingVerdict {
        return Err(Error::State(format!("session is {:?}", session.state.value)).into());
    }
    if state.jobs.session_busy(&id) {
        return Err(Error::State("session has an active job".into()).into());
    }
    let action = body.request.resolve(session.state.last_recommendation.as_ref());
    action.validate()?;
    if let Some(s) = &body.sampler {
        s.validate(state.pipeline.backend().spec().diffusion_steps)?;
    }
    let job = state.jobs.create(JobKind::Sweep, &id).map_err(internal)?;
    let response = json!({ "job_id": job.job_id, "action": action });
    let (bg, job_id) = (state.clone(), job.job_id);
    tokio::task::spawn_blocking(move || run_sweep_job(&bg, &id, &job_id, &action, body.sampler));
    Ok((StatusCode::ACCEPTED, Json(response)))
}

async fn post_verdict(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(verdict): Json<Verdict>,
) -> ApiResult<Json<serde_json::Value>> {
    if state.jobs.session_busy(&id) {
        return Err(Error::State("session has an active job".into()).into());
    }
    let pipeline = state.pipeline.clone();
    let outcome = blocking(move || pipeline.record_verdict(&id, &verdict)).await?;
    Ok(Json(match outcome {
        Outcome::Done { chosen_image } => json!({ "done": true, "chosen_image": chosen_image }),
        Outcome::Next(action) => serde_json::to_value(action).map_err(Error::from)?,
    }))
}

async fn get_job(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<JobStatus>> {
    state.jobs.get(&id).map(Json).ok_or_else(|| ApiError(Error::NotFound(format!("job {id}"))))
}

async fn get_image(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let id = ArtifactId::parse(&id)?;
    let png = state.pipeline.store().load_artifact(ArtifactKind::Image, &id)?;
    Ok(([(header::CONTENT_TYPE, "image/png"), (header::CACHE_CONTROL, "public, max-age=31536000, immutable")], png)
        .into_response())
}

//! HTTP/JSON service over a loaded checkpoint: renders, appearance swaps and
//! a FIFO queue of edit jobs run by a single worker thread.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tpde::autodiff::Tensor;
use tpde::checkpoint::{self, Checkpoint};
use tpde::editing::{self, EditRequest};
use tpde::imageio;
use tpde::netmodels::{LatentEntry, Provenance};
use tpde::renderer::{self, Camera, PoseDistribution};
use tpde::Error;

/// Steps between preview renders attached to a running job.
pub const PREVIEW_EVERY: usize = 20;
pub const MIN_SIZE: usize = 16;
pub const MAX_SIZE: usize = 512;

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

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::MissingLatent(_) => StatusCode::NOT_FOUND,
            Error::InvalidArgument(_) | Error::Image(_) | Error::ShapeMismatch { .. } => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Clone, Debug, Serialize)]
pub struct EditJob {
    pub job_id: String,
    pub status: JobStatus,
    pub step: usize,
    pub total_steps: usize,
    pub last_loss: Option<f64>,
    pub result_latent_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preview_png: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    result: Option<Tensor>,
}

struct QueuedEdit {
    job_id: String,
    request: EditRequest,
}

pub struct AppState {
    ckpt: RwLock<Checkpoint>,
    jobs: Mutex<HashMap<String, EditJob>>,
    next_job: Mutex<u64>,
    queue: Mutex<mpsc::Sender<QueuedEdit>>,
    sidecar: Option<PathBuf>,
    poses: PoseDistribution,
}

pub type SharedState = Arc<AppState>;

/// Builds the shared state and starts the edit worker. Persisted latents go
/// to `sidecar` when given.
pub fn start(ckpt: Checkpoint, sidecar: Option<PathBuf>) -> SharedState {
    let (tx, rx) = mpsc::channel::<QueuedEdit>();
    let state = Arc::new(AppState {
        ckpt: RwLock::new(ckpt),
        jobs: Mutex::new(HashMap::new()),
        next_job: Mutex::new(1),
        queue: Mutex::new(tx),
        sidecar,
        poses: PoseDistribution::default(),
    });
    let worker = Arc::downgrade(&state);
    std::thread::spawn(move || {
        for job in rx {
            let Some(state) = worker.upgrade() else { break };
            run_job(&state, job);
        }
    });
    state
}

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/api/model", get(model_info))
        .route("/api/render", post(render))
        .route("/api/edits", post(submit_edit))
        .route("/api/edits/{id}", get(edit_status))
        .route("/api/latents", post(create_latent))
        .with_state(state)
}

fn update_job(state: &AppState, id: &str, f: impl FnOnce(&mut EditJob)) {
    if let Some(job) = state.jobs.lock().unwrap().get_mut(id) {
        f(job);
    }
}

fn run_job(state: &AppState, job: QueuedEdit) {
    let id = job.job_id.clone();
    update_job(state, &id, |j| j.status = JobStatus::Running);
    let ckpt = state.ckpt.read().unwrap().clone();
    let result = editing::optimize_edit(&ckpt, &job.request, |step, render| {
        let preview = (step.step % PREVIEW_EVERY == 0)
            .then(|| imageio::encode_rgb_png(render.width, render.height, &render.rgb).ok())
            .flatten()
            .map(|b| B64.encode(b));
        update_job(state, &id, |j| {
            j.step = step.step + 1;
            j.last_loss = Some(step.loss);
            if preview.is_some() {
                j.preview_png = preview;
            }
        });
    });
    match result {
        Ok(trace) => {
            let committed = {
                let mut ck = state.ckpt.write().unwrap();
                editing::commit_edit(&mut ck, &job.request.latent_id, &trace.delta)
                    .and_then(|lid| Ok((lid.clone(), ck.latents.get(&lid)?.w.clone())))
            };
            update_job(state, &id, |j| match committed {
                Ok((lid, w)) => {
                    j.status = JobStatus::Done;
                    j.step = j.total_steps;
                    j.result_latent_id = Some(lid);
                    j.result = Some(w);
                    j.preview_png = None;
                }
                Err(e) => {
                    j.status = JobStatus::Failed;
                    j.error = Some(e.to_string());
                }
            });
        }
        Err(e) => update_job(state, &id, |j| {
            j.status = JobStatus::Failed;
            j.error = Some(e.to_string());
        }),
    }
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("malformed request body: {e}")))
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn model_info(State(state): State<SharedState>) -> Json<serde_json::Value> {
    let ck = state.ckpt.read().unwrap();
    Json(json!({
        "classes": ck.classes.names,
        "palette": ck.classes.palette,
        "plane_resolution": ck.model.config.resolution,
        "latent_dim": ck.model.config.latent_dim,
        "latent_ids": ck.latents.ids(),
    }))
}

fn default_radius() -> f64 {
    3.0
}

fn default_size() -> usize {
    64
}

fn default_outputs() -> Vec<String> {
    vec!["rgb".into(), "mask".into(), "depth".into()]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenderRequest {
    pub latent_id: Option<String>,
    pub latent: Option<Vec<f32>>,
    pub appearance_latent_id: Option<String>,
    pub yaw: f64,
    pub pitch: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    #[serde(default = "default_size")]
    pub width: usize,
    #[serde(default = "default_size")]
    pub height: usize,
    #[serde(default = "default_outputs")]
    pub outputs: Vec<String>,
}

fn check_size(width: usize, height: usize) -> ApiResult<()> {
    for v in [width, height] {
        if !(MIN_SIZE..=MAX_SIZE).contains(&v) {
            return Err(ApiError::bad_request(format!(
                "width and height must lie in [{MIN_SIZE}, {MAX_SIZE}], got {width}x{height}"
            )));
        }
    }
    Ok(())
}

async fn render(State(state): State<SharedState>, body: Bytes) -> ApiResult<Json<serde_json::Value>> {
    let req: RenderRequest = parse(&body)?;
    check_size(req.width, req.height)?;
    for o in &req.outputs {
        if !["rgb", "mask", "depth"].contains(&o.as_str()) {
            return Err(ApiError::bad_request(format!("unknown output '{o}'")));
        }
    }
    let mut warnings = Vec::new();
    if !state.poses.contains(req.yaw, req.pitch) {
        warnings.push(format!(
            "pose yaw {} pitch {} is outside the trained range",
            req.yaw, req.pitch
        ));
    }
    blocking(move || {
        let ck = state.ckpt.read().unwrap();
        let w_geo = match (&req.latent_id, &req.latent) {
            (Some(id), None) => ck.latents.get(id)?.w.clone(),
            (None, Some(v)) => {
                if v.len() != ck.model.config.latent_dim {
                    return Err(ApiError::bad_request(format!(
                        "latent vector has {} values, model expects {}",
                        v.len(),
                        ck.model.config.latent_dim
                    )));
                }
                Tensor::new([v.len()], v.clone())?
            }
            _ => return Err(ApiError::bad_request("give exactly one of latent_id and latent")),
        };
        let w_app = match &req.appearance_latent_id {
            Some(id) => ck.latents.get(id)?.w.clone(),
            None => w_geo.clone(),
        };
        let cam = Camera::new(req.yaw, req.pitch, req.radius, req.width, req.height);
        cam.validate()?;
        let started = Instant::now();
        let stats = ck.model.appearance_of(&w_app)?;
        let out = renderer::render_image(&ck.model, &w_geo, &stats, &cam, &ck.render_settings())?;
        let render_ms = started.elapsed().as_secs_f64() * 1e3;
        let want = |k: &str| req.outputs.iter().any(|o| o == k);
        let mut body = json!({ "render_ms": render_ms, "warnings": warnings });
        if want("rgb") {
            body["rgb_png"] = B64.encode(imageio::encode_rgb_png(out.width, out.height, &out.rgb)?).into();
        }
        if want("mask") {
            body["mask_png"] = B64
                .encode(imageio::encode_mask_png(out.width, out.height, &out.argmax_mask())?)
                .into();
        }
        if want("depth") {
            let far = cam.far_plane() as f32;
            body["depth_png"] = B64
                .encode(imageio::encode_depth_png(out.width, out.height, &out.depth, far)?)
                .into();
        }
        Ok(Json(body))
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSubmit {
    pub latent_id: String,
    pub yaw: f64,
    pub pitch: f64,
    #[serde(default = "default_radius")]
    pub radius: f64,
    pub edited_mask_png: String,
    pub steps: Option<usize>,
}

async fn submit_edit(State(state): State<SharedState>, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let req: EditSubmit = parse(&body)?;
    let png = B64
        .decode(req.edited_mask_png.as_bytes())
        .map_err(|e| ApiError::bad_request(format!("edited_mask_png is not base64: {e}")))?;
    let classes = {
        let ck = state.ckpt.read().unwrap();
        ck.latents.get(&req.latent_id)?;
        ck.model.config.classes
    };
    let (w, h, mask) = imageio::decode_mask_png(&png, classes)?;
    check_size(w, h)?;
    let mut request = EditRequest::new(
        req.latent_id.clone(),
        Camera::new(req.yaw, req.pitch, req.radius, w, h),
        mask,
    );
    if let Some(s) = req.steps {
        request.steps = s;
    }
    request.validate(classes)?;

    let job_id = {
        let mut n = state.next_job.lock().unwrap();
        let id = format!("job-{}", *n);
        *n += 1;
        id
    };
    state.jobs.lock().unwrap().insert(
        job_id.clone(),
        EditJob {
            job_id: job_id.clone(),
            status: JobStatus::Queued,
            step: 0,
            total_steps: request.steps,
            last_loss: None,
            result_latent_id: None,
            preview_png: None,
            error: None,
            result: None,
        },
    );
    state
        .queue
        .lock()
        .unwrap()
        .send(QueuedEdit {
            job_id: job_id.clone(),
            request,
        })
        .map_err(|_| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "edit worker has stopped"))?;
    Ok((StatusCode::ACCEPTED, Json(json!({ "job_id": job_id }))))
}

async fn edit_status(State(state): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<EditJob>> {
    let jobs = state.jobs.lock().unwrap();
    let job = jobs
        .get(&id)
        .ok_or_else(|| ApiError::not_found(format!("unknown edit job '{id}'")))?;
    let mut job = job.clone();
    if job.status != JobStatus::Running {
        job.preview_png = None;
    }
    Ok(Json(job))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentCreate {
    pub from_job: Option<String>,
    pub vector: Option<Vec<f32>>,
    pub name: String,
    #[serde(default)]
    pub persist: bool,
}

async fn create_latent(State(state): State<SharedState>, body: Bytes) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let req: LatentCreate = parse(&body)?;
    if req.name.is_empty() {
        return Err(ApiError::bad_request("latent name must not be empty"));
    }
    let (w, provenance) = match (&req.from_job, &req.vector) {
        (Some(job), None) => {
            let jobs = state.jobs.lock().unwrap();
            let j = jobs
                .get(job)
                .ok_or_else(|| ApiError::not_found(format!("unknown edit job '{job}'")))?;
            let w = j
                .result
                .clone()
                .ok_or_else(|| ApiError::bad_request(format!("edit job '{job}' has no result yet")))?;
            (w, Provenance::Edited)
        }
        (None, Some(v)) => (Tensor::new([v.len()], v.clone())?, Provenance::Imported),
        _ => return Err(ApiError::bad_request("give exactly one of from_job and vector")),
    };
    let mut ck = state.ckpt.write().unwrap();
    if w.shape() != [ck.model.config.latent_dim] {
        return Err(ApiError::bad_request(format!(
            "latent has {} values, model expects {}",
            w.numel(),
            ck.model.config.latent_dim
        )));
    }
    let id = ck.latents.fresh_id(&req.name);
    ck.latents.insert(LatentEntry {
        id: id.clone(),
        w,
        provenance,
    })?;
    let mut persisted = false;
    if req.persist {
        let path = state
            .sidecar
            .as_ref()
            .ok_or_else(|| ApiError::bad_request("service was started without a sidecar path"))?;
        checkpoint::save_latents(path, &ck.latents)?;
        persisted = true;
    }
    Ok((StatusCode::CREATED, Json(json!({ "latent_id": id, "persisted": persisted }))))
}

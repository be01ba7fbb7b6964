//! HTTP interface.
//!
//! | method | path                 | body / query                               |
//! |--------|----------------------|--------------------------------------------|
//! | GET    | `/scenes`            |                                            |
//! | GET    | `/render`            | `scene`, `pose` (JSON), `res`, `seed`, `format` |
//! | POST   | `/roi`               | [`RoiRequest`]                             |
//! | POST   | `/edits`             | [`EditRequest`]                            |
//! | GET    | `/edits/{id}/status` |                                            |
//! | GET    | `/edits/{id}/render` | `pose` (JSON), `res`, `seed`, `format`     |
//! | DELETE | `/edits/{id}`        | cancels a running job                      |
//!
//! `res` is `N` or `WxH`. Renders are JSON [`RenderResponse`] unless
//! `format=png`, which returns the bare PNG.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use blendfield::geometry::{project_box_edges, EdgeSample, RoiBox, SceneType};
use blendfield::raster::{Resolution, ScalarMap};
use blendfield::renderer::io::{decode_png, encode_depth, encode_png};
use blendfield::renderer::RenderOutput;
use blendfield::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::jobs::{Job, JobStatus, ScorerSpec};
use crate::scene::{Bounds, EditDescriptor, Scene, WirePose};
use crate::DEFAULT_SEED;

pub const DEFAULT_MAX_SIDE: usize = 512;

pub struct AppState {
    pub scenes: BTreeMap<String, Arc<Scene>>,
    pub jobs: Mutex<HashMap<String, Arc<Job>>>,
    /// Largest accepted image side.
    pub max_side: usize,
    /// Where job states are saved, one subdirectory per edit id.
    pub data_dir: Option<PathBuf>,
    pub scorer: ScorerSpec,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(scenes: Vec<Scene>, scorer: ScorerSpec) -> Self {
        Self {
            scenes: scenes.into_iter().map(|s| (s.id().to_string(), Arc::new(s))).collect(),
            jobs: Mutex::new(HashMap::new()),
            max_side: DEFAULT_MAX_SIDE,
            data_dir: None,
            scorer,
            next_id: AtomicU64::new(1),
        }
    }

    fn scene(&self, id: &str) -> Result<Arc<Scene>, ServiceError> {
        self.scenes
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown scene {id:?}")))
    }

    fn job(&self, id: &str) -> Result<Arc<Job>, ServiceError> {
        self.jobs
            .lock()
            .expect("jobs lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ServiceError::NotFound(format!("unknown edit {id:?}")))
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/scenes", get(list_scenes))
        .route("/render", get(render))
        .route("/roi", post(roi))
        .route("/edits", post(create_edit))
        .route("/edits/{id}", axum::routing::delete(cancel_edit))
        .route("/edits/{id}/status", get(edit_status))
        .route("/edits/{id}/render", get(edit_render))
        .with_state(state)
}

/// Parses `N` or `WxH`.
pub fn parse_resolution(s: &str, max_side: usize) -> Result<Resolution, ServiceError> {
    let bad = || ServiceError::BadRequest(format!("bad resolution {s:?}"));
    let (w, h) = match s.split_once(['x', 'X']) {
        Some((w, h)) => (w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?),
        None => {
            let n: usize = s.parse().map_err(|_| bad())?;
            (n, n)
        }
    };
    if w == 0 || h == 0 {
        return Err(bad());
    }
    if w > max_side || h > max_side {
        return Err(ServiceError::BadRequest(format!(
            "resolution {w}x{h} exceeds the {max_side}x{max_side} limit"
        )));
    }
    Ok(Resolution::new(w, h))
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ServiceError> {
    serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("body: {e}")))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> Result<T, ServiceError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SceneInfo {
    pub id: String,
    pub scene_type: SceneType,
    pub bounds: Bounds,
    pub default_camera: WirePose,
    pub resolution: Resolution,
}

async fn list_scenes(State(app): State<Arc<AppState>>) -> Json<Vec<SceneInfo>> {
    Json(
        app.scenes
            .values()
            .map(|s| SceneInfo {
                id: s.id().to_string(),
                scene_type: s.descriptor.scene_type,
                bounds: s.descriptor.bounds,
                default_camera: s.descriptor.default_camera,
                resolution: s.descriptor.render.resolution,
            })
            .collect(),
    )
}

#[derive(Debug, Deserialize)]
pub struct ViewQuery {
    pub scene: Option<String>,
    pub pose: Option<String>,
    pub res: Option<String>,
    pub seed: Option<u64>,
    pub format: Option<String>,
}

/// A render with its per-pixel expected depth.
#[derive(Debug, Serialize, Deserialize)]
pub struct RenderResponse {
    pub width: usize,
    pub height: usize,
    pub png_base64: String,
    /// `BFDEPTH` container: magic, `u32` width and height, `f32` values.
    pub depth_base64: String,
}

struct View {
    pose: WirePose,
    res: Option<Resolution>,
    seed: u64,
    png_only: bool,
}

fn view_of(q: &ViewQuery, scene: &Scene, max_side: usize) -> Result<View, ServiceError> {
    let pose = match &q.pose {
        Some(p) => serde_json::from_str(p).map_err(|e| ServiceError::BadRequest(format!("pose: {e}")))?,
        None => scene.descriptor.default_camera,
    };
    let res = match &q.res {
        Some(r) => Some(parse_resolution(r, max_side)?),
        None => {
            let r = scene.descriptor.render.resolution;
            if r.width > max_side || r.height > max_side {
                return Err(ServiceError::BadRequest("scene default resolution exceeds the limit".into()));
            }
            None
        }
    };
    let png_only = match q.format.as_deref() {
        None | Some("json") => false,
        Some("png") => true,
        Some(f) => return Err(ServiceError::BadRequest(format!("unknown format {f:?}"))),
    };
    Ok(View {
        pose,
        res,
        seed: q.seed.unwrap_or(DEFAULT_SEED),
        png_only,
    })
}

fn render_response(out: &RenderOutput, png_only: bool) -> Result<Response, ServiceError> {
    let png = encode_png(&out.rgb).map_err(|e| ServiceError::Internal(e.to_string()))?;
    if png_only {
        return Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response());
    }
    let b64 = base64::engine::general_purpose::STANDARD;
    let res = out.resolution();
    Ok(Json(RenderResponse {
        width: res.width,
        height: res.height,
        png_base64: b64.encode(png),
        depth_base64: b64.encode(encode_depth(&out.depth)),
    })
    .into_response())
}

async fn render(
    State(app): State<Arc<AppState>>,
    q: Result<Query<ViewQuery>, QueryRejection>,
) -> Result<Response, ServiceError> {
    let Query(q) = q.map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let id = q.scene.clone().ok_or_else(|| ServiceError::BadRequest("missing scene".into()))?;
    let scene = app.scene(&id)?;
    let view = view_of(&q, &scene, app.max_side)?;
    let pose = view.pose.to_pose()?;
    let out = blocking(move || scene.render(&pose, view.res, view.seed)).await?;
    render_response(&out, view.png_only)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoiRequest {
    pub scene: String,
    pub roi: RoiBox,
    pub pose: WirePose,
    /// `N` or `WxH`; defaults to the scene's render resolution.
    #[serde(default)]
    pub res: Option<String>,
    #[serde(default = "default_edge_samples")]
    pub samples_per_edge: usize,
    /// When false, every on-image sample is reported visible.
    #[serde(default = "default_true")]
    pub occlusion: bool,
}

fn default_edge_samples() -> usize {
    16
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RoiResponse {
    pub width: usize,
    pub height: usize,
    pub edges: Vec<EdgeSample>,
}

async fn roi(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Json<RoiResponse>, ServiceError> {
    let req: RoiRequest = parse_body(&body)?;
    let scene = app.scene(&req.scene)?;
    let pose = req.pose.to_pose()?;
    let res = match &req.res {
        Some(r) => parse_resolution(r, app.max_side)?,
        None => scene.descriptor.render.resolution,
    };
    if !(2..=1024).contains(&req.samples_per_edge) {
        return Err(ServiceError::BadRequest("samples_per_edge must lie in [2, 1024]".into()));
    }
    let edges = blocking(move || {
        let depth = if req.occlusion {
            scene.render(&pose, Some(res), DEFAULT_SEED)?.occlusion_depth()
        } else {
            ScalarMap::filled(res, f64::INFINITY)
        };
        Ok(project_box_edges(&req.roi, &pose, &depth, req.samples_per_edge))
    })
    .await?;
    Ok(Json(RoiResponse {
        width: res.width,
        height: res.height,
        edges,
    }))
}

/// Body of `POST /edits`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EditRequest {
    /// Edit id; generated when absent.
    #[serde(default)]
    pub id: Option<String>,
    pub edit: EditDescriptor,
    /// Training configuration; blend mode, texture flag and scene type are
    /// taken from the edit and scene.
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Mock target image, base64 PNG.
    #[serde(default)]
    pub target_png_base64: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EditCreated {
    pub id: String,
}

/// Training config for `edit` on `scene`, starting from `base`.
pub fn edit_config(base: TrainConfig, edit: &EditDescriptor, scene: &Scene) -> TrainConfig {
    let mut cfg = base;
    cfg.blend = edit.blend;
    cfg.texture_only = edit.texture_only;
    cfg.pose.scene_type = scene.descriptor.scene_type;
    cfg.activation = scene.descriptor.render.activation;
    cfg
}

async fn create_edit(
    State(app): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<EditCreated>), ServiceError> {
    let req: EditRequest = parse_body(&body)?;
    let scene = app.scene(&req.edit.scene_id)?;
    let cfg = edit_config(req.train.unwrap_or_default(), &req.edit, &scene);
    if cfg.resolution.width > app.max_side || cfg.resolution.height > app.max_side {
        return Err(ServiceError::BadRequest("training resolution exceeds the limit".into()));
    }
    let scorer = match (&req.target_png_base64, &app.scorer) {
        (Some(b), ScorerSpec::Mock { seed, .. }) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b)
                .map_err(|e| ServiceError::BadRequest(format!("target: {e}")))?;
            let img = decode_png(&bytes).map_err(|e| ServiceError::BadRequest(format!("target: {e}")))?;
            ScorerSpec::Mock {
                target: Some(img),
                seed: *seed,
            }
        }
        (Some(_), ScorerSpec::External { .. }) => {
            return Err(ServiceError::BadRequest("target images need the mock scorer".into()));
        }
        (None, s) => s.clone(),
    };

    let mut jobs = app.jobs.lock().expect("jobs lock");
    let id = match req.id {
        Some(id) => {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
                return Err(ServiceError::BadRequest("edit ids use [A-Za-z0-9_-]".into()));
            }
            if jobs.get(&id).is_some_and(|j| j.is_running()) {
                return Err(ServiceError::Conflict(format!("edit {id:?} is already training")));
            }
            id
        }
        None => loop {
            let id = format!("edit-{}", app.next_id.fetch_add(1, Ordering::SeqCst));
            if !jobs.contains_key(&id) {
                break id;
            }
        },
    };
    let out_dir = app.data_dir.as_ref().map(|d| d.join(&id));
    let job = Job::start(id.clone(), scene, req.edit, cfg, scorer, out_dir)?;
    jobs.insert(id.clone(), job);
    Ok((StatusCode::CREATED, Json(EditCreated { id })))
}

async fn edit_status(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<JobStatus>, ServiceError> {
    Ok(Json(app.job(&id)?.status()))
}

async fn cancel_edit(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<JobStatus>, ServiceError> {
    let job = app.job(&id)?;
    job.cancel();
    Ok(Json(job.status()))
}

async fn edit_render(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    q: Result<Query<ViewQuery>, QueryRejection>,
) -> Result<Response, ServiceError> {
    let Query(q) = q.map_err(|e| ServiceError::BadRequest(e.to_string()))?;
    let job = app.job(&id)?;
    let view = view_of(&q, &job.scene, app.max_side)?;
    let pose = view.pose.to_pose()?;
    let snap = job.snapshot();
    let edit = job.edit_at(&snap);
    let scene = job.scene.clone();
    let out = blocking(move || scene.render_edited(&edit, &snap.generator, &pose, view.res, view.seed)).await?;
    render_response(&out, view.png_only)
}

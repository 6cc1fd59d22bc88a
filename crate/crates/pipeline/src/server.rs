//! HTTP service for the annotation front end and for launching long
//! stages as background jobs.
//!
//! Case ids are directory names under the served root; photo ids are
//! `{case}~{photo file name}`.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use photovol::preprocess::{calibrate_photo, LandmarkSet};
use photovol::reconstruct::StageReport;
use serde::{Deserialize, Serialize};

use crate::case::{Case, StageName};
use crate::config::Config;
use crate::error::{PipelineError, Result};
use crate::imageio::{encode_mask, read_photo};
use crate::overlay::{overlay_png, Axis};
use crate::stages::{self, CalibrationRecord, SegParams};

/// Response headers echoing the plane an overlay shows.
pub const OVERLAY_AXIS: header::HeaderName = header::HeaderName::from_static("x-overlay-axis");
pub const OVERLAY_INDEX: header::HeaderName = header::HeaderName::from_static("x-overlay-index");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Reconstruct,
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobError {
    pub code: String,
    pub message: String,
}

/// One optimisation stage as reported to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceItem {
    pub label: String,
    pub initial: f64,
    #[serde(rename = "final")]
    pub final_value: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobInfo {
    pub id: String,
    pub case: String,
    pub kind: JobKind,
    pub status: JobStatus,
    /// Fraction of the work finished, in `[0, 1]`.
    pub progress: f64,
    pub trace: Vec<TraceItem>,
    pub error: Option<JobError>,
}

#[derive(Default)]
struct Jobs {
    next: u64,
    table: BTreeMap<String, JobInfo>,
}

pub struct AppState {
    root: PathBuf,
    config: Option<PathBuf>,
    jobs: Mutex<Jobs>,
    /// Serialises read-modify-write of annotation files.
    annotations: Mutex<()>,
}

impl AppState {
    pub fn new(root: PathBuf, config: Option<PathBuf>) -> Arc<AppState> {
        Arc::new(AppState {
            root,
            config,
            jobs: Mutex::new(Jobs::default()),
            annotations: Mutex::new(()),
        })
    }

    fn case(&self, id: &str) -> Result<Case> {
        let ok = !id.is_empty() && !id.starts_with('.') && !id.contains(['/', '\\', '~']);
        let dir = self.root.join(id);
        if ok && dir.join("photos").is_dir() {
            Case::open(&dir)
        } else {
            Err(PipelineError::missing(format!("case {id}"), "no such case"))
        }
    }

    fn photo(&self, id: &str) -> Result<(Case, String)> {
        let (c, p) = id.split_once('~').ok_or_else(|| {
            PipelineError::missing(format!("photo {id}"), "photo ids look like case~file")
        })?;
        let case = self.case(c)?;
        case.photo_path(p)?;
        Ok((case, p.to_string()))
    }

    fn config(&self, case: &Case) -> Result<Config> {
        Config::load(Some(&case.root), self.config.as_deref())
    }

    fn update(&self, job: &str, f: impl FnOnce(&mut JobInfo)) {
        if let Some(j) = self.jobs.lock().expect("job table lock").table.get_mut(job) {
            f(j);
        }
    }
}

struct ApiError(PipelineError);

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        ApiError(e)
    }
}

pub fn status_of(e: &PipelineError) -> StatusCode {
    match e {
        PipelineError::Missing { .. } => StatusCode::NOT_FOUND,
        PipelineError::Stale { .. } => StatusCode::CONFLICT,
        PipelineError::Io { .. } => StatusCode::INTERNAL_SERVER_ERROR,
        PipelineError::Core(c) if !c.is_validation() => StatusCode::INTERNAL_SERVER_ERROR,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    }
}

fn job_error(e: &PipelineError) -> JobError {
    JobError {
        code: e.code().to_string(),
        message: e.to_string(),
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (status_of(&self.0), Json(job_error(&self.0))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn parse_body<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T> {
    serde_json::from_slice(body).map_err(|e| PipelineError::Annotation(e.to_string()))
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T> + Send + 'static,
) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError),
        Err(e) => Err(ApiError(PipelineError::Unsupported(format!(
            "worker failed: {e}"
        )))),
    }
}

#[derive(Serialize)]
struct CaseSummary {
    id: String,
    photos: usize,
    /// Stages whose products are present and current.
    current: Vec<StageName>,
}

async fn list_cases(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<CaseSummary>>> {
    let root = st.root.clone();
    let out = blocking(move || {
        let rd = std::fs::read_dir(&root).map_err(|e| PipelineError::io(&root, e))?;
        let mut dirs: Vec<PathBuf> = rd
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.join("photos").is_dir())
            .collect();
        dirs.sort();
        dirs.iter()
            .map(|d| {
                let c = Case::open(d)?;
                let stages = [
                    StageName::Calibrate,
                    StageName::Mask,
                    StageName::Stack,
                    StageName::Reconstruct,
                    StageName::Segment,
                    StageName::Evaluate,
                ];
                Ok(CaseSummary {
                    id: c.id(),
                    photos: c.photos()?.len(),
                    current: stages.into_iter().filter(|s| c.is_current(*s)).collect(),
                })
            })
            .collect::<Result<Vec<_>>>()
    })
    .await?;
    Ok(Json(out))
}

#[derive(Serialize)]
struct PhotoSummary {
    id: String,
    name: String,
    landmarks: bool,
    seed: Option<[f64; 2]>,
}

async fn list_photos(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Vec<PhotoSummary>>> {
    let case = st.case(&id)?;
    let lms = case.landmarks()?;
    let seeds = case.seeds()?;
    let out = case
        .photos()?
        .into_iter()
        .map(|n| PhotoSummary {
            id: format!("{id}~{n}"),
            landmarks: lms.contains_key(&n),
            seed: seeds.get(&n).copied(),
            name: n,
        })
        .collect();
    Ok(Json(out))
}

async fn get_photo(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    let (case, name) = st.photo(&id)?;
    let path = case.photo_path(&name)?;
    let bytes = crate::error::read(&path)?;
    let jpeg =
        name.to_ascii_lowercase().ends_with("jpg") || name.to_ascii_lowercase().ends_with("jpeg");
    let ct = if jpeg { "image/jpeg" } else { "image/png" };
    Ok(([(header::CONTENT_TYPE, ct)], bytes).into_response())
}

async fn get_landmarks(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<LandmarkSet>> {
    let (case, name) = st.photo(&id)?;
    let lm = case.landmarks()?.get(&name).copied().ok_or_else(|| {
        PipelineError::missing(format!("landmarks for {id}"), "none recorded yet")
    })?;
    Ok(Json(lm))
}

#[derive(Serialize)]
struct SavedLandmarks {
    landmarks: LandmarkSet,
    /// Raw photo pixel size implied by the landmarks.
    pixel_size_mm: f64,
}

async fn put_landmarks(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<SavedLandmarks>> {
    let (case, name) = st.photo(&id)?;
    let lm: LandmarkSet = parse_body(&body)?;
    let _g = st.annotations.lock().expect("annotation lock");
    case.set_landmarks(&name, lm)?;
    let fit = lm.fit().map_err(PipelineError::from)?;
    Ok(Json(SavedLandmarks {
        landmarks: lm,
        pixel_size_mm: fit.pixel_size_mm,
    }))
}

#[derive(Deserialize)]
struct SeedBody {
    x: f64,
    y: f64,
}

/// Run mask extraction from a click and return the mask as PNG. With
/// landmarks the mask is on the calibrated grid, otherwise on the raw one.
async fn post_seed(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let (case, name) = st.photo(&id)?;
    let seed: SeedBody = parse_body(&body)?;
    let cfg = st.config(&case)?;
    let lm = case.landmarks()?.get(&name).copied();
    let c2 = case.clone();
    let n2 = name.clone();
    let png = blocking(move || {
        let raw = read_photo(&c2.photo_path(&n2)?)?;
        let mask = match lm {
            Some(lm) => {
                let cal = calibrate_photo(&raw, &lm, cfg.calibrate.archive_pixel_mm)?;
                let rec = CalibrationRecord {
                    file: String::new(),
                    fit: cal.fit,
                    origin_mm: cal.origin_mm,
                    pixel_size_mm: cfg.calibrate.archive_pixel_mm,
                };
                stages::mask_photo(cal.image, &rec, [seed.x, seed.y], &cfg)?
            }
            None => photovol::preprocess::extract_mask(
                &raw,
                photovol::preprocess::SeedClick {
                    x: seed.x,
                    y: seed.y,
                },
                &cfg.mask,
            )?,
        };
        Ok(encode_mask(&mask))
    })
    .await?;
    {
        let _g = st.annotations.lock().expect("annotation lock");
        case.set_seed(&name, [seed.x, seed.y])?;
    }
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

async fn get_order(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<Vec<String>>> {
    let case = st.case(&id)?;
    let order = case
        .order()?
        .ok_or_else(|| PipelineError::missing(format!("order for {id}"), "none recorded yet"))?;
    Ok(Json(order))
}

async fn put_order(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<Vec<String>>> {
    let case = st.case(&id)?;
    let order: Vec<String> = parse_body(&body)?;
    let _g = st.annotations.lock().expect("annotation lock");
    case.set_order(&order)?;
    Ok(Json(order))
}

fn stage_item(s: &StageReport) -> TraceItem {
    TraceItem {
        label: format!("{}:{:?}/{}", s.stage, s.level, s.factor).to_lowercase(),
        initial: s.initial,
        final_value: s.final_value,
        values: s.trace.clone(),
    }
}

fn run_job(st: &AppState, job: &str, case: &Case, kind: JobKind) -> Result<()> {
    let cfg = st.config(case)?;
    match kind {
        JobKind::Reconstruct => {
            stages::prepare(case, &cfg)?;
            let total = cfg.reconstruct.schedule.len() as f64;
            stages::reconstruct(case, &cfg, &mut |s| {
                st.update(job, |j| {
                    j.trace.push(stage_item(s));
                    j.progress = (j.trace.len() as f64 / total).min(1.0);
                })
            })?;
        }
        JobKind::Segment => {
            stages::segment(case, &cfg)?;
            let p = case.stage_dir(StageName::Segment).join(stages::PARAMS);
            let params: SegParams = serde_json::from_slice(&crate::error::read(&p)?)
                .map_err(|e| PipelineError::format(&p, e.to_string()))?;
            let values: Vec<f64> = params
                .trace
                .iter()
                .filter(|t| t.accepted)
                .map(|t| t.objective)
                .collect();
            let item = TraceItem {
                label: "segmentation".into(),
                initial: values.first().copied().unwrap_or(f64::NAN),
                final_value: values.last().copied().unwrap_or(f64::NAN),
                values,
            };
            st.update(job, |j| j.trace.push(item));
        }
    }
    Ok(())
}

async fn start_job(st: Arc<AppState>, id: String, kind: JobKind) -> ApiResult<Response> {
    let case = st.case(&id)?;
    let job = {
        let mut jobs = st.jobs.lock().expect("job table lock");
        let busy = jobs
            .table
            .values()
            .any(|j| j.case == id && matches!(j.status, JobStatus::Queued | JobStatus::Running));
        if busy {
            let body = JobError {
                code: "job_running".into(),
                message: format!("a job is already running for case {id}"),
            };
            return Ok((StatusCode::CONFLICT, Json(body)).into_response());
        }
        jobs.next += 1;
        let jid = format!("job-{}", jobs.next);
        let info = JobInfo {
            id: jid.clone(),
            case: id.clone(),
            kind,
            status: JobStatus::Queued,
            progress: 0.0,
            trace: Vec::new(),
            error: None,
        };
        jobs.table.insert(jid.clone(), info);
        jid
    };
    let st2 = st.clone();
    let jid = job.clone();
    tokio::task::spawn_blocking(move || {
        st2.update(&jid, |j| j.status = JobStatus::Running);
        let r = run_job(&st2, &jid, &case, kind);
        if let Err(e) = &r {
            log::error!("{jid} failed: {e}");
        }
        st2.update(&jid, |j| match r {
            Ok(()) => {
                j.status = JobStatus::Done;
                j.progress = 1.0;
            }
            Err(e) => {
                j.status = JobStatus::Failed;
                j.error = Some(job_error(&e));
            }
        });
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(serde_json::json!({ "job_id": job })),
    )
        .into_response())
}

async fn post_reconstruct(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    start_job(st, id, JobKind::Reconstruct).await
}

async fn post_segment(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Response> {
    start_job(st, id, JobKind::Segment).await
}

async fn get_job(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<JobInfo>> {
    let jobs = st.jobs.lock().expect("job table lock");
    let j = jobs
        .table
        .get(&id)
        .cloned()
        .ok_or_else(|| PipelineError::missing(format!("job {id}"), "no such job"))?;
    Ok(Json(j))
}

async fn get_overlay(
    State(st): State<Arc<AppState>>,
    UrlPath((id, axis, index)): UrlPath<(String, String, usize)>,
) -> ApiResult<Response> {
    let case = st.case(&id)?;
    let parsed: Axis = axis.parse()?;
    let png = blocking(move || overlay_png(&case, parsed, index)).await?;
    let headers = [
        (header::CONTENT_TYPE, "image/png".to_string()),
        (OVERLAY_AXIS, axis),
        (OVERLAY_INDEX, index.to_string()),
    ];
    Ok((headers, png).into_response())
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/cases", get(list_cases))
        .route("/cases/{id}/photos", get(list_photos))
        .route("/cases/{id}/order", get(get_order).put(put_order))
        .route("/cases/{id}/reconstruct", post(post_reconstruct))
        .route("/cases/{id}/segment", post(post_segment))
        .route("/cases/{id}/overlay/{axis}/{index}", get(get_overlay))
        .route("/photos/{id}", get(get_photo))
        .route(
            "/photos/{id}/landmarks",
            get(get_landmarks).put(put_landmarks),
        )
        .route("/photos/{id}/seed", post(post_seed))
        .route("/jobs/{id}", get(get_job))
        .with_state(state)
}

/// Serve `root` until the process is stopped.
pub fn serve(root: PathBuf, config: Option<PathBuf>, addr: SocketAddr) -> Result<()> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| PipelineError::io(&root, e))?;
    rt.block_on(async move {
        let app = router(AppState::new(root.clone(), config));
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| PipelineError::io(&root, e))?;
        log::info!("serving {} on http://{addr}", root.display());
        axum::serve(listener, app)
            .await
            .map_err(|e| PipelineError::io(&root, e))
    })
}

//! HTTP API used by the annotation UI. Binary responses carry a strong ETag
//! (SHA-256 of the body) and honour `If-None-Match`.

use std::path::PathBuf;

use axum::body::Body;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use mvinpaint::segmentation::AnnotationSet;
use mvinpaint::Pose;
use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::error::ServiceError;
use crate::jobs::{hex, Executor};
use crate::pipeline::{check_provider, render_png, GridChoice, JobKind, JobSpec};

#[derive(Clone)]
pub struct AppState {
    pub executor: Executor,
}

pub fn router(executor: Executor) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(serde_json::json!({"status": "ok"})) }))
        .route("/scenes", post(create_scene).get(list_scenes))
        .route("/scenes/{id}", get(get_scene))
        .route("/scenes/{id}/views/{file}", get(get_view))
        .route("/scenes/{id}/annotations", get(get_annotations).put(put_annotations))
        .route("/scenes/{id}/jobs", post(create_job))
        .route("/scenes/{id}/masks/{file}", get(get_mask))
        .route("/scenes/{id}/priors/{file}", get(get_prior))
        .route("/scenes/{id}/renders", get(get_render))
        .route("/scenes/{id}/report", get(get_report))
        .route("/jobs", get(list_jobs))
        .route("/jobs/{id}", get(get_job).delete(cancel_job))
        .route("/jobs/{id}/cancel", post(cancel_job))
        .with_state(AppState { executor })
}

pub struct ApiError(ServiceError);

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError(e)
    }
}

impl From<mvinpaint::Error> for ApiError {
    fn from(e: mvinpaint::Error) -> Self {
        ApiError(e.into())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            e if e.is_validation() => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let mut body = serde_json::json!({"error": self.0.to_string()});
        if let ServiceError::Core(mvinpaint::Error::MissingFiles(files)) = &self.0 {
            body["missing_files"] = serde_json::json!(files);
        }
        (status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(ServiceError::Internal(e.to_string())))?
        .map_err(ApiError)
}

fn etagged(headers: &HeaderMap, bytes: Vec<u8>, content_type: &'static str) -> Response {
    let tag = format!("\"{}\"", &hex(&Sha256::digest(&bytes))[..32]);
    let matches = headers
        .get(header::IF_NONE_MATCH)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.split(',').any(|t| t.trim() == tag || t.trim() == "*"));
    let etag = HeaderValue::from_str(&tag).expect("hex etag is a valid header");
    if matches {
        return (StatusCode::NOT_MODIFIED, [(header::ETAG, etag)]).into_response();
    }
    (
        [
            (header::ETAG, etag),
            (header::CONTENT_TYPE, HeaderValue::from_static(content_type)),
            (header::CACHE_CONTROL, HeaderValue::from_static("no-cache")),
        ],
        Body::from(bytes),
    )
        .into_response()
}

fn png_index(file: &str) -> Result<usize, ServiceError> {
    file.strip_suffix(".png")
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| ServiceError::NotFound(format!("{file}: expected {{index}}.png")))
}

fn read_file(path: PathBuf, what: String) -> Result<Vec<u8>, ServiceError> {
    std::fs::read(&path).map_err(|_| ServiceError::NotFound(what))
}

#[derive(Deserialize)]
struct CreateScene {
    path: String,
    #[serde(default)]
    id: Option<String>,
}

async fn create_scene(State(s): State<AppState>, Json(req): Json<CreateScene>) -> ApiResult<Response> {
    let store = s.executor.store().clone();
    let m = blocking(move || store.ingest(std::path::Path::new(&req.path), req.id.as_deref())).await?;
    Ok((StatusCode::CREATED, Json(m)).into_response())
}

async fn list_scenes(State(s): State<AppState>) -> ApiResult<Json<Vec<String>>> {
    let store = s.executor.store().clone();
    Ok(Json(blocking(move || store.list()).await?))
}

async fn get_scene(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let store = s.executor.store().clone();
    let m = blocking(move || store.manifest(&id)).await?;
    Ok(Json(m).into_response())
}

async fn get_view(
    State(s): State<AppState>,
    UrlPath((id, file)): UrlPath<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let store = s.executor.store().clone();
    let bytes = blocking(move || {
        let path = store.view_path(&id, png_index(&file)?)?;
        read_file(path, format!("view {file} of scene {id}"))
    })
    .await?;
    Ok(etagged(&headers, bytes, "image/png"))
}

async fn put_annotations(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Json(ann): Json<AnnotationSet>,
) -> ApiResult<Json<AnnotationSet>> {
    let store = s.executor.store().clone();
    let saved = blocking(move || {
        store.save_annotations(&id, &ann)?;
        store.annotations(&id)
    })
    .await?;
    Ok(Json(saved))
}

async fn get_annotations(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<AnnotationSet>> {
    let store = s.executor.store().clone();
    Ok(Json(blocking(move || store.annotations(&id)).await?))
}

#[derive(Deserialize)]
struct CreateJob {
    kind: JobKind,
    #[serde(default)]
    config: serde_json::Value,
}

async fn create_job(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: axum::body::Bytes,
) -> ApiResult<Response> {
    let req: CreateJob = serde_json::from_slice(&body)
        .map_err(|e| ServiceError::Validation(format!("request body: {e}")))?;
    let spec = JobSpec::from_request(req.kind, req.config)?;
    let executor = s.executor.clone();
    let job = blocking(move || {
        if let JobSpec::Inpaint(c) = &spec {
            check_provider(executor.store(), &id, &c.provider)?;
        }
        executor.submit(&id, spec)
    })
    .await?;
    let body = serde_json::json!({"job_id": job.id, "job": job});
    Ok((StatusCode::ACCEPTED, Json(body)).into_response())
}

async fn list_jobs(State(s): State<AppState>) -> Json<Vec<crate::jobs::Job>> {
    Json(s.executor.list())
}

async fn get_job(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<crate::jobs::Job>> {
    Ok(Json(s.executor.poll(&id)?))
}

async fn cancel_job(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<crate::jobs::Job>> {
    Ok(Json(s.executor.cancel(&id)?))
}

async fn stage_png(
    s: AppState,
    id: String,
    file: String,
    sub: &'static str,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let store = s.executor.store().clone();
    let bytes = blocking(move || {
        let view = png_index(&file)?;
        let stems = store.stems(&id)?;
        let stem = stems
            .get(view)
            .ok_or_else(|| ServiceError::NotFound(format!("view {view} of scene {id}")))?;
        let path = store.stage_dir(&id).join(sub).join(format!("{stem}.png"));
        read_file(path, format!("{sub}/{file} of scene {id}"))
    })
    .await?;
    Ok(etagged(&headers, bytes, "image/png"))
}

async fn get_mask(
    State(s): State<AppState>,
    UrlPath((id, file)): UrlPath<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    stage_png(s, id, file, "masks", headers).await
}

async fn get_prior(
    State(s): State<AppState>,
    UrlPath((id, file)): UrlPath<(String, String)>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    stage_png(s, id, file, "priors_rgb", headers).await
}

#[derive(Deserialize)]
struct RenderQuery {
    /// 16 comma-separated floats, row-major camera-to-world; or a view index.
    pose: String,
    #[serde(default)]
    grid: Option<GridChoice>,
    #[serde(default)]
    samples: Option<usize>,
}

async fn get_render(
    State(s): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RenderQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let store = s.executor.store().clone();
    let bytes = blocking(move || {
        let pose = parse_pose(&store, &id, &q.pose)?;
        let samples = q.samples.unwrap_or(48).clamp(1, 1024);
        render_png(&store, &id, &pose, q.grid.unwrap_or(GridChoice::Inpainted), samples)
    })
    .await?;
    Ok(etagged(&headers, bytes, "image/png"))
}

fn parse_pose(store: &crate::store::Store, id: &str, text: &str) -> Result<Pose, ServiceError> {
    if let Ok(view) = text.trim().parse::<usize>() {
        let m = store.manifest(id)?;
        let f = m
            .frames
            .get(view)
            .ok_or_else(|| ServiceError::NotFound(format!("view {view} of scene {id}")))?;
        return Ok(Pose::from_row_major(&f.matrix)?);
    }
    let values: Vec<f64> = text
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| ServiceError::Validation(format!("pose: {e}")))?;
    Pose::from_row_major(&values).map_err(|e| ServiceError::Validation(format!("pose: {e}")))
}

async fn get_report(State(s): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let store = s.executor.store().clone();
    let report = blocking(move || {
        store.manifest(&id)?;
        let stages = store.stage_dir(&id);
        let mut out = serde_json::Map::new();
        for (key, file) in [
            ("segment", "segment_report.json"),
            ("inpaint", "report.json"),
            ("refine", "refined/stats.json"),
            ("evaluate", "eval.json"),
        ] {
            if let Ok(text) = std::fs::read_to_string(stages.join(file)) {
                out.insert(key.into(), serde_json::from_str(&text)?);
            }
        }
        if out.is_empty() {
            return Err(ServiceError::NotFound(format!("reports for scene {id}")));
        }
        Ok(serde_json::Value::Object(out))
    })
    .await?;
    Ok(Json(report))
}

//! HTTP adapter over [`SessionStore`]. Handlers parse, delegate to the
//! library through the session and serialize; no pipeline math lives here.

use std::path::Path;
use std::sync::Arc;

use afm_core::flatten::FlattenDirection;
use afm_core::maskgen::{MaskOptions, ParamHelp, PipelineParams};
use afm_core::restore::{RestoreConfig, RestoreMethod};
use afm_core::spm_io::{read_any, write_txt_matrix};
use afm_core::HeightMap;
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::config::{take_keys, typed, ConfigError};
use crate::error::{Stage, StageError};
use crate::rle::RleMask;
use crate::session::{FlattenRequest, HeightStage, Session, SessionError, SessionStore};

pub const MAX_UPLOAD_BYTES: usize = 256 * 1024 * 1024;

type AppState = Arc<SessionStore>;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: Value,
}

impl ApiError {
    fn new(status: StatusCode, name: &str, field: Option<&str>, detail: impl Into<String>) -> Self {
        let mut body = json!({ "error": name, "detail": detail.into() });
        if let Some(f) = field {
            body["field"] = json!(f);
        }
        ApiError { status, body }
    }

    fn invalid(field: &str, detail: impl Into<String>) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidParam", Some(field), detail)
    }
}

impl From<ConfigError> for ApiError {
    fn from(e: ConfigError) -> Self {
        let field = e.field().map(str::to_string);
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidParam", field.as_deref(), e.to_string())
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let detail = e.to_string();
        match e {
            SessionError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "NotFound", None, detail),
            SessionError::Busy => ApiError::new(StatusCode::CONFLICT, "Busy", None, detail),
            SessionError::StaleRevision { current, .. } => {
                let mut err = ApiError::new(StatusCode::CONFLICT, "StaleRevision", None, detail);
                err.body["revision"] = json!(current);
                err
            }
            SessionError::MissingStage(_) => ApiError::new(StatusCode::CONFLICT, "MissingStage", None, detail),
            SessionError::Stage(s) => {
                let mut err = ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, &s.name, s.field.as_deref(), s.detail);
                err.body["stage"] = json!(s.stage);
                err
            }
            SessionError::Persist(_) => {
                ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Persist", None, detail)
            }
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking session work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.unwrap_or_else(|e| {
        Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "Panic",
            None,
            e.to_string(),
        ))
    })
}

pub fn router(store: AppState) -> Router {
    Router::new()
        .route("/api/images", post(upload))
        .route("/api/images/{id}", get(summary))
        .route("/api/images/{id}/height", get(height))
        .route("/api/images/{id}/classify", post(classify))
        .route("/api/images/{id}/mask", post(mask))
        .route("/api/images/{id}/exclusions", post(exclusions))
        .route("/api/images/{id}/flatten", post(flatten))
        .route("/api/images/{id}/restore", post(restore))
        .route("/api/images/{id}/metrics", get(metrics))
        .route("/api/images/{id}/export.txt", get(export))
        .route("/api/params/help", get(help))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(store)
}

/// [`router`] plus static files from `dir` for every non-API path.
pub fn router_with_static(store: AppState, dir: &Path) -> Router {
    router(store).fallback_service(tower_http::services::ServeDir::new(dir))
}

/// Request object with the optional `revision` echo split off.
fn parse_object(body: &[u8]) -> ApiResult<(Map<String, Value>, Option<u64>)> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok((Map::new(), None));
    }
    let value: Value =
        serde_json::from_slice(body).map_err(|e| ApiError::invalid("$", format!("malformed JSON: {e}")))?;
    let Value::Object(mut obj) = value else {
        return Err(ApiError::invalid("$", "request body must be a JSON object"));
    };
    let revision = match obj.remove("revision") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .ok_or_else(|| ApiError::invalid("revision", "must be a non-negative integer"))?,
        ),
    };
    Ok((obj, revision))
}

/// Overlays `obj` on `base` and deserializes, rejecting unknown keys.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, obj: Map<String, Value>) -> ApiResult<T> {
    let Value::Object(mut merged) = serde_json::to_value(base).expect("settings serialize") else {
        unreachable!("settings serialize to objects");
    };
    for (k, v) in obj {
        if !merged.contains_key(&k) {
            return Err(ApiError::invalid(&k, "unknown field"));
        }
        merged.insert(k, v);
    }
    Ok(typed(Value::Object(merged), "")?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: usize,
    pub cols: usize,
    pub min: f64,
    pub max: f64,
}

impl Summary {
    pub fn of(map: &HeightMap) -> Self {
        let (min, max) = map.min_max();
        Summary {
            rows: map.rows(),
            cols: map.cols(),
            min,
            max,
        }
    }
}

async fn upload(State(store): State<AppState>, body: Bytes) -> ApiResult<impl IntoResponse> {
    blocking(move || {
        let map = read_any(&body).map_err(|e| {
            let se = StageError::new(Stage::Load, &e);
            ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, &se.name, None, se.detail)
        })?;
        let summary = Summary::of(&map);
        let id = store.create(map)?;
        Ok((
            StatusCode::CREATED,
            Json(json!({ "image_id": id, "revision": 0, "summary": summary })),
        ))
    })
    .await
}

fn session_view(s: &Session) -> Value {
    json!({
        "image_id": s.image_id,
        "revision": s.revision,
        "summary": Summary::of(&s.original),
        "stages": {
            "mask": s.bundle.is_some(),
            "flattened": s.flattened.is_some(),
            "restored": s.restored.is_some(),
        },
        "label": s.classification.map(|c| c.label),
        "params": s.params,
        "mask_options": s.mask_options,
        "flatten": s.flatten_cfg,
        "restore": s.restore_cfg,
        "exclusions": s.user_exclusions,
        "metrics": s.metrics,
    })
}

async fn summary(State(store): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    blocking(move || Ok(Json(store.read(&id, session_view)?))).await
}

#[derive(Debug, Deserialize)]
struct StageQuery {
    stage: Option<String>,
}

fn parse_stage(q: &StageQuery) -> ApiResult<Option<HeightStage>> {
    q.stage
        .as_deref()
        .map(|s| {
            serde_json::from_value(json!(s))
                .map_err(|_| ApiError::invalid("stage", format!("`{s}` is not original, flattened or restored")))
        })
        .transpose()
}

fn wants_binary(headers: &HeaderMap) -> bool {
    headers
        .get(header::ACCEPT)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.contains("application/octet-stream"))
}

/// Little-endian `f32` heights in row-major order.
pub fn encode_f32(map: &HeightMap) -> Vec<u8> {
    map.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

async fn height(
    State(store): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<StageQuery>,
    headers: HeaderMap,
) -> ApiResult<Response> {
    let stage = parse_stage(&q)?.unwrap_or_default();
    let binary = wants_binary(&headers);
    blocking(move || {
        let (map, revision) = store.read(&id, |s| (s.height(stage).cloned(), s.revision))?;
        let map = map.ok_or(SessionError::MissingStage(stage.name()))?;
        let summary = Summary::of(&map);
        if binary {
            let mut resp = encode_f32(&map).into_response();
            let h = resp.headers_mut();
            h.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
            for (k, v) in [
                ("x-rows", summary.rows.to_string()),
                ("x-cols", summary.cols.to_string()),
                ("x-min", summary.min.to_string()),
                ("x-max", summary.max.to_string()),
                ("x-revision", revision.to_string()),
                ("x-stage", stage.name().to_string()),
            ] {
                h.insert(k, HeaderValue::from_str(&v).expect("ascii header"));
            }
            return Ok(resp);
        }
        Ok(Json(json!({
            "image_id": id,
            "stage": stage,
            "revision": revision,
            "rows": summary.rows,
            "cols": summary.cols,
            "min": summary.min,
            "max": summary.max,
            "data": map.data(),
        }))
        .into_response())
    })
    .await
}

async fn classify(State(store): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<Value>> {
    blocking(move || {
        let (obj, revision) = parse_object(&body)?;
        if let Some(k) = obj.keys().next() {
            return Err(ApiError::invalid(k, "unknown field"));
        }
        let classifier = store.classifier().clone();
        let out = store.mutate(&id, revision, |s| {
            let c = s.classify(&classifier)?;
            Ok(json!({
                "label": c.label,
                "scores": c.scores,
                "features": c.features,
                "revision": s.revision,
            }))
        })?;
        Ok(Json(out))
    })
    .await
}

async fn mask(State(store): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<Value>> {
    blocking(move || {
        let (mut obj, revision) = parse_object(&body)?;
        let defaults = store.defaults();
        let mut options = defaults.mask_options();
        for (k, v) in take_keys(&mut obj, &["connectivity", "seed_stats"]) {
            match k.as_str() {
                "connectivity" => options.connectivity = typed(v, "connectivity")?,
                _ => options.seed_stats = typed(v, "seed_stats")?,
            }
        }
        let params: PipelineParams = overlay(&defaults.params, obj)?;
        if let Err(e) = params.validate() {
            return Err(SessionError::Stage(crate::stages::mask_error(e)).into());
        }
        let out = store.mutate(&id, revision, |s| {
            let b = s.run_mask(params, options)?;
            let view = mask_view(b);
            Ok(json!({ "revision": s.revision, "mask": view }))
        })?;
        let mut v = out["mask"].clone();
        v["revision"] = out["revision"].clone();
        Ok(Json(v))
    })
    .await
}

fn mask_view(b: &afm_core::maskgen::MaskBundle) -> Value {
    let stripes = b.stripes().count();
    json!({
        "raw": RleMask::encode(&b.raw),
        "filtered": RleMask::encode(&b.filtered),
        "expanded": RleMask::encode(&b.expanded),
        "grad_threshold": b.grad_threshold,
        "stripes": stripes,
        "blobs": b.components.len() - stripes,
    })
}

async fn exclusions(State(store): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<Value>> {
    blocking(move || {
        let (mut obj, revision) = parse_object(&body)?;
        let rects = match obj.remove("rects") {
            Some(v) => typed::<Vec<[usize; 4]>>(v, "rects")?,
            None => return Err(ApiError::invalid("rects", "missing field")),
        };
        if let Some(k) = obj.keys().next() {
            return Err(ApiError::invalid(k, "unknown field"));
        }
        let out = store.mutate(&id, revision, |s| {
            let kept = s.set_exclusions(&rects)?.to_vec();
            Ok(json!({ "rects": kept, "revision": s.revision }))
        })?;
        Ok(Json(out))
    })
    .await
}

async fn flatten(State(store): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<Value>> {
    blocking(move || {
        let (obj, revision) = parse_object(&body)?;
        let d = &store.defaults().flatten;
        let base = FlattenRequest {
            direction: d.direction,
            order: d.order,
            mask_aware: d.mask_aware,
        };
        let req: FlattenRequest = overlay(&base, obj)?;
        let out = store.mutate(&id, revision, |s| {
            let summary = Summary::of(s.run_flatten(req)?);
            Ok(json!({ "revision": s.revision, "summary": summary, "metrics": s.metrics }))
        })?;
        Ok(Json(out))
    })
    .await
}

async fn restore(State(store): State<AppState>, UrlPath(id): UrlPath<String>, body: Bytes) -> ApiResult<Json<Value>> {
    blocking(move || {
        let (obj, revision) = parse_object(&body)?;
        let cfg: RestoreConfig = overlay(&store.defaults().restore, obj)?;
        if let Err(e) = cfg.validate() {
            return Err(ApiError::from(crate::config::restore_field_error(&e, "")));
        }
        let out = store.mutate(&id, revision, |s| {
            let summary = Summary::of(s.run_restore(cfg)?);
            let pixels = s.restored_region.as_ref().map_or(0, |m| m.count());
            Ok(json!({
                "revision": s.revision,
                "summary": summary,
                "restored_pixels": pixels,
                "metrics": s.metrics,
            }))
        })?;
        Ok(Json(out))
    })
    .await
}

async fn metrics(State(store): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Value>> {
    blocking(move || {
        let out = store.read(&id, |s| json!({ "revision": s.revision, "metrics": s.metrics }))?;
        Ok(Json(out))
    })
    .await
}

async fn export(
    State(store): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<StageQuery>,
) -> ApiResult<Response> {
    let stage = parse_stage(&q)?;
    blocking(move || {
        let text = store.read(&id, |s| match stage {
            Some(st) => s.height(st).map(write_txt_matrix).ok_or(SessionError::MissingStage(st.name())),
            None => Ok(write_txt_matrix(s.latest().1)),
        })??;
        Ok(([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], text).into_response())
    })
    .await
}

/// Help entry for settings outside the mask tunables.
#[derive(Debug, Clone, Serialize)]
pub struct SettingHelp {
    pub name: &'static str,
    pub description: &'static str,
    pub default: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<Value>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max: Option<f64>,
}

fn choices<T: Serialize>(items: &[T]) -> Option<Vec<Value>> {
    Some(items.iter().map(|i| serde_json::to_value(i).expect("enum serializes")).collect())
}

pub fn help_document() -> Value {
    let flat = FlattenRequest::default();
    let rest = RestoreConfig::default();
    let mask = MaskOptions::default();
    let params: Vec<ParamHelp> = PipelineParams::help();
    let flatten = vec![
        SettingHelp {
            name: "direction",
            description: "Scan-line axis fitted; auto picks the axis of the dominant background slope, both runs rows then columns.",
            default: json!(flat.direction),
            choices: choices(&[
                FlattenDirection::Row,
                FlattenDirection::Column,
                FlattenDirection::Both,
                FlattenDirection::Auto,
            ]),
            min: None,
            max: None,
        },
        SettingHelp {
            name: "order",
            description: "Polynomial order of each line baseline.",
            default: json!(flat.order),
            choices: None,
            min: Some(0.0),
            max: Some(3.0),
        },
        SettingHelp {
            name: "mask_aware",
            description: "Exclude the artifact mask and the user rectangles from baseline fits.",
            default: json!(flat.mask_aware),
            choices: choices(&[true, false]),
            min: None,
            max: None,
        },
    ];
    let restore = vec![
        SettingHelp {
            name: "method",
            description: "Inpainting method for masked pixels.",
            default: json!(rest.method),
            choices: choices(&[
                RestoreMethod::Directional,
                RestoreMethod::FastMarching,
                RestoreMethod::Bilinear,
                RestoreMethod::Kriging,
            ]),
            min: None,
            max: None,
        },
        SettingHelp {
            name: "radius",
            description: "Neighborhood radius of fast-marching inpainting, in pixels.",
            default: json!(rest.radius),
            choices: None,
            min: Some(1.0),
            max: None,
        },
        SettingHelp {
            name: "smooth_sigma",
            description: "Gaussian sigma of the smoothing applied inside the restored region.",
            default: json!(rest.smooth_sigma),
            choices: None,
            min: Some(f64::MIN_POSITIVE),
            max: None,
        },
        SettingHelp {
            name: "full_expand",
            description: "Widen stripe components to whole scan lines before inpainting.",
            default: json!(rest.full_expand),
            choices: choices(&[true, false]),
            min: None,
            max: None,
        },
    ];
    json!({
        "params": params,
        "mask_options": {
            "connectivity": { "default": mask.connectivity, "choices": [4, 8] },
            "seed_stats": { "default": mask.seed_stats, "choices": ["robust", "moments"] },
        },
        "flatten": flatten,
        "restore": restore,
    })
}

async fn help() -> Json<Value> {
    Json(help_document())
}

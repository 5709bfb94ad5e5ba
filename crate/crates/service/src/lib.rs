//! HTTP API over one immutable recoloring database.
//!
//! | method | path | body | response |
//! |--------|------|------|----------|
//! | POST | `/v1/transform` | [`TransformRequest`] | `{image, plan, plan_digest, timings}` |
//! | POST | `/v1/preview` | [`TransformRequest`] (image) | `{plan, plan_digest, thumbnails}` |
//! | GET | `/v1/database/stats` | | [`Stats`] |
//! | GET | `/healthz` | | `{status, database_loaded}` |
//! | GET | `/thumbnails/{id}` | | PNG |
//!
//! `plan` is the canonical plan document, embedded verbatim, so identical
//! requests produce byte-identical plans. Errors are `{"error", "field"?}`
//! with 400 (bad input), 413 (body over the cap), 404 (unknown thumbnail),
//! 503 (no or empty database) or 500.

use std::collections::BTreeMap;
use std::sync::Arc;

use affect_core::emotion::{Emotion, CHANNEL_COUNT};
use affect_core::pipeline::{PipelineParams, Source, StageError, StageTimings, TransferPlan};
use affect_core::{EmotionDistribution, Pipeline, PipelineError};
use axum::extract::rejection::JsonRejection;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use tower_http::cors::{AllowOrigin, CorsLayer};

pub const DEFAULT_BODY_LIMIT: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub body_limit: usize,
    /// Allowed browser origins; empty allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { body_limit: DEFAULT_BODY_LIMIT, cors_origins: Vec::new() }
    }
}

#[derive(Clone)]
pub struct AppState {
    pipeline: Option<Arc<Pipeline>>,
}

impl AppState {
    pub fn new(pipeline: Option<Pipeline>) -> Self {
        Self { pipeline: pipeline.map(Arc::new) }
    }

    fn pipeline(&self) -> Result<Arc<Pipeline>, ApiError> {
        match &self.pipeline {
            Some(p) if !p.database().is_empty() => Ok(p.clone()),
            Some(_) => Err(ApiError::unavailable("database is empty")),
            None => Err(ApiError::unavailable("database not loaded")),
        }
    }
}

pub fn router(state: AppState, config: &ServiceConfig) -> Router {
    let origins = if config.cors_origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(config.cors_origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    let cors = CorsLayer::new()
        .allow_origin(origins)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE]);
    Router::new()
        .route("/v1/transform", post(transform))
        .route("/v1/preview", post(preview))
        .route("/v1/database/stats", get(stats))
        .route("/healthz", get(healthz))
        .route("/thumbnails/{id}", get(thumbnail))
        .layer(DefaultBodyLimit::max(config.body_limit))
        .layer(cors)
        .with_state(state)
}

#[derive(Debug, Clone, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

impl ApiError {
    fn bad_field(field: &str, error: impl ToString) -> Self {
        Self { status: StatusCode::BAD_REQUEST, error: error.to_string(), field: Some(field.to_string()) }
    }

    fn unavailable(error: &str) -> Self {
        Self { status: StatusCode::SERVICE_UNAVAILABLE, error: error.to_string(), field: None }
    }

    fn internal(error: impl ToString) -> Self {
        Self { status: StatusCode::INTERNAL_SERVER_ERROR, error: error.to_string(), field: None }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        let status = match r.status() {
            StatusCode::PAYLOAD_TOO_LARGE => StatusCode::PAYLOAD_TOO_LARGE,
            _ => StatusCode::BAD_REQUEST,
        };
        Self { status, error: r.body_text(), field: None }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let status = match e.source {
            StageError::InvalidParams(_) => StatusCode::BAD_REQUEST,
            StageError::EmptyDatabase => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self { status, error: e.to_string(), field: None }
    }
}

/// Emotion as a `{name: value}` map, seven values in channel order, or a preset/list string.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum EmotionInput {
    Map(BTreeMap<String, f64>),
    Values(Vec<f64>),
    Text(String),
}

impl EmotionInput {
    pub fn distribution(&self) -> Result<EmotionDistribution, ApiError> {
        let bad = |e: &dyn std::fmt::Display| ApiError::bad_field("emotion", e);
        match self {
            EmotionInput::Map(m) => {
                let mut w = [0.0; CHANNEL_COUNT];
                for (name, v) in m {
                    let e: Emotion = name.parse().map_err(|e| bad(&e))?;
                    w[e.index()] = *v;
                }
                EmotionDistribution::from_weights(w).map_err(|e| bad(&e))
            }
            EmotionInput::Values(v) => {
                let w: [f64; CHANNEL_COUNT] = v
                    .as_slice()
                    .try_into()
                    .map_err(|_| bad(&format!("expected {CHANNEL_COUNT} values, got {}", v.len())))?;
                EmotionDistribution::from_weights(w).map_err(|e| bad(&e))
            }
            EmotionInput::Text(s) => s.parse().map_err(|e| bad(&e)),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct TransformRequest {
    /// Base64 PNG or JPEG.
    pub image: String,
    pub emotion: EmotionInput,
    /// Source id recorded in the plan.
    #[serde(default)]
    pub source_id: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub omega_multiplier: Option<f64>,
    #[serde(default)]
    pub strength: Option<f64>,
    #[serde(default)]
    pub passes: Option<usize>,
}

impl TransformRequest {
    fn params(&self) -> PipelineParams {
        let d = PipelineParams::default();
        PipelineParams {
            k: self.k.unwrap_or(d.k),
            omega_multiplier: self.omega_multiplier.unwrap_or(d.omega_multiplier),
            strength: self.strength.unwrap_or(d.strength),
            smoothing_passes: self.passes.unwrap_or(d.smoothing_passes),
        }
    }

    fn source(&self) -> Result<Source, ApiError> {
        let bytes = BASE64.decode(self.image.trim()).map_err(|e| ApiError::bad_field("image", format!("base64: {e}")))?;
        let image = image::load_from_memory(&bytes).map_err(|e| ApiError::bad_field("image", format!("decode: {e}")))?;
        Ok(Source::new(self.source_id.clone().unwrap_or_else(|| "source".into()), image.to_rgb8()))
    }
}

#[derive(Serialize)]
struct TransformResponse {
    image: String,
    plan: Box<RawValue>,
    plan_digest: String,
    timings: StageTimings,
}

#[derive(Serialize)]
struct Thumbnail {
    id: String,
    url: String,
}

#[derive(Serialize)]
struct PreviewResponse {
    plan: Box<RawValue>,
    plan_digest: String,
    thumbnails: Vec<Thumbnail>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Stats {
    pub records: usize,
    pub feature_signature: String,
    pub binning: String,
    pub digest: String,
}

fn raw_plan(plan: &TransferPlan) -> Result<Box<RawValue>, ApiError> {
    RawValue::from_string(plan.to_canonical_json()).map_err(ApiError::internal)
}

struct Prepared {
    pipeline: Arc<Pipeline>,
    source: Source,
    target: EmotionDistribution,
    params: PipelineParams,
}

fn prepare(state: &AppState, body: Result<Json<TransformRequest>, JsonRejection>) -> Result<Prepared, ApiError> {
    let pipeline = state.pipeline()?;
    let Json(req) = body?;
    let target = req.emotion.distribution()?;
    let params = req.params();
    params.validate()?;
    Ok(Prepared { pipeline, source: req.source()?, target, params })
}

async fn transform(
    State(state): State<AppState>,
    body: Result<Json<TransformRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let p = prepare(&state, body)?;
    let result = tokio::task::spawn_blocking(move || p.pipeline.transform(&p.source, &p.target, &p.params))
        .await
        .map_err(ApiError::internal)??;
    let mut png = Vec::new();
    result
        .output
        .write_to(&mut std::io::Cursor::new(&mut png), image::ImageFormat::Png)
        .map_err(ApiError::internal)?;
    Ok(Json(TransformResponse {
        image: BASE64.encode(png),
        plan: raw_plan(&result.plan)?,
        plan_digest: result.plan.digest(),
        timings: result.timings,
    })
    .into_response())
}

async fn preview(
    State(state): State<AppState>,
    body: Result<Json<TransformRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let p = prepare(&state, body)?;
    let plan = tokio::task::spawn_blocking(move || p.pipeline.preview_targets(&p.source, &p.target, &p.params))
        .await
        .map_err(ApiError::internal)??;
    let thumbnails = plan
        .targets
        .iter()
        .map(|t| Thumbnail { id: t.id.clone(), url: format!("/thumbnails/{}", t.id) })
        .collect();
    Ok(Json(PreviewResponse { plan: raw_plan(&plan)?, plan_digest: plan.digest(), thumbnails }).into_response())
}

async fn stats(State(state): State<AppState>) -> Result<Json<Stats>, ApiError> {
    let Some(pipeline) = &state.pipeline else {
        return Err(ApiError::unavailable("database not loaded"));
    };
    let db = pipeline.database();
    Ok(Json(Stats {
        records: db.len(),
        feature_signature: db.signature().key(),
        binning: db.binning().key(),
        digest: db.digest().to_string(),
    }))
}

async fn healthz(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok", "database_loaded": state.pipeline.is_some() }))
}

async fn thumbnail(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let pipeline = state.pipeline()?;
    let not_found = || ApiError { status: StatusCode::NOT_FOUND, error: format!("no thumbnail for `{id}`"), field: None };
    let path = pipeline.database().thumbnail_path(&id).ok_or_else(not_found)?;
    let bytes = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::de::DeserializeOwned;
use tower_http::cors::{AllowOrigin, CorsLayer};

use rendertime_core::bundle::ModelBundle;
use rendertime_core::raycast::RenderConfig;
use rendertime_core::stepctl::{adapt_delta, g_eval, ControllerConfig};
use rendertime_core::wire::{
    ErrorBody, FieldError, ModelInfo, PredictRequest, PredictResponse, RenderRequest, RenderResponse, VolumeInfo,
};

use crate::state::{AppState, LoadedVolume};

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    Unprocessable { field: String, message: String },
    Unavailable(String),
    Internal(String),
}

impl From<FieldError> for ApiError {
    fn from(e: FieldError) -> Self {
        ApiError::Unprocessable { field: e.field.to_string(), message: e.message }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, error, field) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, m, None),
            ApiError::Unprocessable { field, message } => {
                (StatusCode::UNPROCESSABLE_ENTITY, format!("{field}: {message}"), Some(field))
            }
            ApiError::Unavailable(m) => (StatusCode::SERVICE_UNAVAILABLE, m, None),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, m, None),
        };
        (status, Json(ErrorBody { error, field })).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

/// Parses a JSON body, reporting the offending field path on failure.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    let mut de = serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::Unprocessable {
            field: if path == "." { "body".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

fn lookup<'a>(s: &'a AppState, volume_id: &str) -> Result<(&'a ModelBundle, &'a LoadedVolume), ApiError> {
    let model = s.model.as_ref().ok_or_else(|| ApiError::Unavailable("model not loaded".into()))?;
    let vol = s.volume(volume_id).ok_or_else(|| ApiError::NotFound(format!("unknown volume {volume_id:?}")))?;
    Ok((model, vol))
}

fn feature(vol: &LoadedVolume) -> Result<&[f32], ApiError> {
    vol.feature.as_deref().ok_or_else(|| ApiError::Unavailable("volume has no feature vector".into()))
}

async fn health() -> &'static str {
    "ok"
}

async fn volumes(State(s): State<Arc<AppState>>) -> Json<Vec<VolumeInfo>> {
    Json(s.volume_infos())
}

async fn model(State(s): State<Arc<AppState>>) -> ApiResult<ModelInfo> {
    s.model_info().map(Json).ok_or_else(|| ApiError::Unavailable("model not loaded".into()))
}

async fn predict(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<PredictResponse> {
    let req: PredictRequest = parse(&body)?;
    let (m, vol) = lookup(&s, &req.volume_id)?;
    let q = req.validate(m.lobes())?;
    let predicted_ms = m
        .prednet
        .predict(feature(vol)?, &q.pose, &q.tf, q.img)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(PredictResponse { predicted_ms }))
}

/// Predicts at the reference step, picks the step (controller or request),
/// renders and reports the prediction rescaled to the chosen step.
pub fn render_blocking(s: &AppState, req: &RenderRequest) -> Result<RenderResponse, ApiError> {
    let (m, vol) = lookup(s, &req.volume_id)?;
    let q = req.validate(m.lobes())?;
    let t_ref = m.prednet.predict(feature(vol)?, &q.pose, &q.tf, q.img).map_err(|e| ApiError::Internal(e.to_string()))?;
    let delta = match req.controller {
        Some(c) if c.enabled => {
            let cfg = ControllerConfig { t_target: c.target_ms, delta_ref: m.delta_ref, ..Default::default() };
            adapt_delta(&s.g, &cfg, t_ref)
        }
        _ => req.delta.unwrap_or(m.delta_ref),
    };
    let cfg = RenderConfig::default().with_image(q.img.0, q.img.1).with_step(delta as f32);
    let (frame, stats) = vol.renderer.render(&q.tf, &q.pose, &cfg).map_err(|e| ApiError::Internal(e.to_string()))?;
    let png = frame.png_bytes().map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(RenderResponse {
        frame_png_b64: base64::engine::general_purpose::STANDARD.encode(png),
        stats,
        predicted_ms: t_ref * g_eval(&s.g, delta),
        delta_used: delta,
    })
}

async fn render(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<RenderResponse> {
    let req: RenderRequest = parse(&body)?;
    tokio::task::spawn_blocking(move || render_blocking(&s, &req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
        .map(Json)
}

/// CORS for the given origins; an empty list allows any origin.
pub fn cors(origins: &[String]) -> CorsLayer {
    let allow = if origins.is_empty() {
        AllowOrigin::any()
    } else {
        AllowOrigin::list(origins.iter().filter_map(|o| HeaderValue::from_str(o).ok()))
    };
    CorsLayer::new()
        .allow_origin(allow)
        .allow_methods([Method::GET, Method::POST])
        .allow_headers([header::CONTENT_TYPE])
}

pub fn router(state: Arc<AppState>, origins: &[String]) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/volumes", get(volumes))
        .route("/api/model", get(model))
        .route("/api/predict", post(predict))
        .route("/api/render", post(render))
        .layer(cors(origins))
        .with_state(state)
}

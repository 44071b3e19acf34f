//! Local HTTP service: one generator pass per session, then warp-only reshapes.

use std::num::NonZeroUsize;
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use axum::extract::{DefaultBodyLimit, Multipart, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bodyflow::flow::encode_flo;
use bodyflow::imaging::{decode_image, encode_png, BitDepth, Raster};
use bodyflow::keypoints::ingest_keypoints;
use bodyflow::pipeline::{predict_flow, reshape_raster, FlowStats};
use bodyflow::warp::{visualize_flow, MultiplierMu};
use bodyflow::{Error, FlowField32, Generator32, Image32};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::Semaphore;

pub const DEFAULT_CAPACITY: usize = 16;
const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;

#[derive(Clone, Copy, Debug)]
pub struct ServiceConfig {
    /// Sessions kept before the least recently used one is evicted.
    pub capacity: usize,
    /// Concurrent generator passes.
    pub workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            capacity: DEFAULT_CAPACITY,
            workers: 1,
        }
    }
}

/// An uploaded photo and its cached full-resolution flow.
pub struct Session {
    pub id: String,
    pub image: Image32,
    pub depth: BitDepth,
    pub flow: FlowField32,
    /// Pixel window `(x, y, w, h)` outside of which the flow is zero.
    pub window: (usize, usize, usize, usize),
    /// The upload quantized at its own depth; reshapes only overwrite `window`.
    pub base: Raster,
    pub created: SystemTime,
    pub checkpoint_id: String,
}

pub struct AppState {
    generator: Arc<Generator32>,
    checkpoint_id: String,
    sessions: Mutex<LruCache<String, Arc<Session>>>,
    inference: Semaphore,
}

impl AppState {
    pub fn new(generator: Generator32, checkpoint_id: impl Into<String>, config: ServiceConfig) -> Arc<Self> {
        let capacity = NonZeroUsize::new(config.capacity).unwrap_or(NonZeroUsize::MIN);
        Arc::new(AppState {
            generator: Arc::new(generator),
            checkpoint_id: checkpoint_id.into(),
            sessions: Mutex::new(LruCache::new(capacity)),
            inference: Semaphore::new(config.workers.max(1)),
        })
    }

    pub fn session(&self, id: &str) -> Option<Arc<Session>> {
        self.sessions.lock().expect("session lock").get(id).cloned()
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session lock").len()
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
    }

    /// Input problems are the client's fault; anything else is ours.
    fn from_core(stage: &str, e: Error) -> Self {
        let status = match e {
            Error::Parse { .. } | Error::Schema(_) | Error::Invalid(_) | Error::Image(_) | Error::Json(_) | Error::Format(_) => {
                StatusCode::BAD_REQUEST
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, format!("{stage}: {e}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

#[derive(Serialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub flow_stats: FlowStats,
    pub checkpoint_id: String,
}

async fn create_session(State(state): State<Arc<AppState>>, mut multipart: Multipart) -> ApiResult<Json<SessionCreated>> {
    let (mut image, mut keypoints) = (None, None);
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("multipart: {e}")))?
    {
        let name = field.name().unwrap_or_default().to_string();
        let bytes = field
            .bytes()
            .await
            .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("multipart field `{name}`: {e}")))?;
        match name.as_str() {
            "image" => image = Some(bytes),
            "keypoints" => keypoints = Some(bytes),
            _ => {}
        }
    }
    let image = image.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing multipart field `image`"))?;
    let keypoints = keypoints.ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "missing multipart field `keypoints`"))?;
    let kp = ingest_keypoints(&keypoints).map_err(|e| ApiError::from_core("keypoints", e))?;

    let _permit = state
        .inference
        .acquire()
        .await
        .map_err(|_| ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "service shutting down"))?;
    let generator = state.generator.clone();
    let (image, depth, prediction, base) = blocking(move || {
        let (image, depth) = decode_image::<f32>(&image).map_err(|e| ApiError::from_core("image", e))?;
        let prediction = predict_flow(&generator, &image, &kp).map_err(|e| ApiError::from_core("inference", e))?;
        let base = image.quantize(depth);
        Ok((image, depth, prediction, base))
    })
    .await?;

    let session = Session {
        id: uuid::Uuid::new_v4().simple().to_string(),
        image,
        depth,
        flow: prediction.flow,
        window: prediction.window,
        base,
        created: SystemTime::now(),
        checkpoint_id: state.checkpoint_id.clone(),
    };
    let body = SessionCreated {
        session_id: session.id.clone(),
        flow_stats: FlowStats::of(&session.flow),
        checkpoint_id: session.checkpoint_id.clone(),
    };
    state
        .sessions
        .lock()
        .expect("session lock")
        .put(session.id.clone(), Arc::new(session));
    Ok(Json(body))
}

#[derive(Deserialize)]
pub struct ReshapeRequest {
    pub mu: f64,
}

async fn reshape(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<ReshapeRequest>,
) -> ApiResult<Response> {
    let mu = MultiplierMu::strict(req.mu).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let png = blocking(move || {
        let out = reshape_raster(&session.base, &session.image, &session.flow, session.window, mu)
            .map_err(|e| ApiError::from_core("warp", e))?;
        out.encode_png().map_err(|e| ApiError::from_core("encode", e))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Deserialize)]
pub struct FlowQuery {
    #[serde(default)]
    pub format: Option<String>,
}

async fn flow(State(state): State<Arc<AppState>>, Path(id): Path<String>, Query(q): Query<FlowQuery>) -> ApiResult<Response> {
    let session = state.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    match q.format.as_deref().unwrap_or("png") {
        "png" => {
            let png = blocking(move || {
                encode_png(&visualize_flow(&session.flow), BitDepth::Eight).map_err(|e| ApiError::from_core("encode", e))
            })
            .await?;
            Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
        }
        "flo" => Ok(([(header::CONTENT_TYPE, "application/octet-stream")], encode_flo(&session.flow)).into_response()),
        other => Err(ApiError::new(
            StatusCode::BAD_REQUEST,
            format!("unknown flow format `{other}` (png or flo)"),
        )),
    }
}

async fn delete_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    match state.sessions.lock().expect("session lock").pop(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}

async fn healthz(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "checkpoint_id": state.checkpoint_id }))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", axum::routing::delete(delete_session))
        .route("/sessions/{id}/reshape", post(reshape))
        .route("/sessions/{id}/flow", get(flow))
        .route("/healthz", get(healthz))
        .layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES))
        .with_state(state)
}

pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

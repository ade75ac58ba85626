// SPDX-License-Identifier: MIT OR Apache-2.0

//! JSON-over-HTTP front end.
//!
//! | route | |
//! |---|---|
//! | `POST /analyze` | prepare, trace once, attribute, answer |
//! | `POST /probe` | follow-up on a cached trace, no model pass |
//! | `GET /sessions/{id}/image.png` | the preprocessed image |
//! | `GET /sessions/{id}/heatmap/{method}.png` | overlay, `?scale=shared` for side by side |
//! | `GET /models`, `GET /health` | |

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{Body, Bytes};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use patchlens_core::analysis::{
    analyze, AnalyzeOptions, AnalyzeRequest, HeatmapRefs, ProbeRequest,
};
use patchlens_core::attribution::MapMethod;
use patchlens_core::mm::{encode_png, Templates};
use patchlens_core::{Error, ErrorKind};
use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::registry::Registry;
use crate::session::{Lookup, SessionCache};

pub struct AppState {
    pub config: ServiceConfig,
    pub registry: Registry,
    pub sessions: SessionCache,
    pub templates: Templates,
}

impl AppState {
    pub fn new(config: ServiceConfig) -> patchlens_core::Result<Self> {
        config.validate()?;
        let templates = match &config.templates {
            Some(p) => Templates::load(p)?,
            None => Templates::builtin(),
        };
        Ok(Self {
            registry: Registry::new(&config.models, config.max_pending),
            sessions: SessionCache::new(
                config.cache_capacity,
                Duration::from_secs(config.session_ttl_secs),
            ),
            templates,
            config,
        })
    }
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    status: u16,
    kind: &'static str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
}

/// An error response with its HTTP status.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: &'static str,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
            field: None,
        }
    }

    fn field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    fn malformed(e: serde_json::Error) -> Self {
        let msg = e.to_string();
        let field = msg
            .split_once("missing field `")
            .or_else(|| msg.split_once("unknown field `"))
            .and_then(|(_, rest)| rest.split_once('`'))
            .map(|(f, _)| f.to_owned());
        let mut err = Self::new(StatusCode::BAD_REQUEST, "malformed", msg);
        err.field = field;
        err
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match (&e, e.kind()) {
            (Error::Image(_), _) => (StatusCode::UNPROCESSABLE_ENTITY, "undecodable-image"),
            (Error::Saturated { .. }, _) => (StatusCode::SERVICE_UNAVAILABLE, "saturated"),
            (_, ErrorKind::Input) => (StatusCode::BAD_REQUEST, "input"),
            (_, ErrorKind::Model) => (StatusCode::UNPROCESSABLE_ENTITY, "capability"),
            (_, ErrorKind::Internal) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let message = e.to_string();
        let field = match &e {
            Error::Input(m) => m
                .split_once(": ")
                .map(|(f, _)| f)
                .filter(|f| !f.contains(' '))
                .map(str::to_owned),
            _ => None,
        };
        let mut err = Self::new(status, kind, message);
        err.field = field;
        err
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            status: self.status.as_u16(),
            kind: self.kind,
            message: self.message,
            field: self.field,
        };
        (self.status, Json(serde_json::json!({ "error": body }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

/// Wire form of an analyze request; the image travels as base64.
#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeBody {
    #[serde(default)]
    pub model: Option<String>,
    pub question: String,
    #[serde(default)]
    pub context: Option<String>,
    #[serde(default)]
    pub image_base64: Option<String>,
    #[serde(default)]
    pub options: AnalyzeOptions,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeBody {
    pub session: String,
    pub probe: ProbeRequest,
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

fn session(state: &AppState, id: &str) -> ApiResult<Arc<patchlens_core::analysis::Analysis>> {
    match state.sessions.get(id) {
        Lookup::Live(a) => Ok(a),
        Lookup::Expired => Err(ApiError::new(
            StatusCode::GONE,
            "expired",
            format!("session `{id}` has expired; analyze again"),
        )),
        Lookup::Unknown => Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "not-found",
            format!("no session `{id}`"),
        )),
    }
}

async fn analyze_route(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let body: AnalyzeBody = serde_json::from_slice(&body).map_err(ApiError::malformed)?;
    let model_id = body
        .model
        .clone()
        .unwrap_or_else(|| state.config.default_model.clone());
    let image = body
        .image_base64
        .as_deref()
        .map(|s| base64::engine::general_purpose::STANDARD.decode(s.trim()))
        .transpose()
        .map_err(|e| {
            ApiError::new(
                StatusCode::BAD_REQUEST,
                "malformed",
                format!("image_base64: {e}"),
            )
            .field("image_base64")
        })?;
    let st = state.clone();
    let response = blocking(move || {
        let entry = st.registry.get(&model_id)?.ok_or_else(|| {
            ApiError::new(
                StatusCode::NOT_FOUND,
                "unknown-model",
                format!("no model `{model_id}`"),
            )
            .field("model")
        })?;
        let mut options = body.options;
        options.deterministic |= st.config.deterministic;
        if st.config.capture_precision != Default::default() {
            options.capture.precision = st.config.capture_precision;
        }
        let req = AnalyzeRequest {
            question: body.question,
            context: body.context,
            image,
            options,
        };
        let mut analysis = analyze(&entry.handle, entry.encoder(), &st.templates, &req)?;
        let id = uuid::Uuid::new_v4().to_string();
        analysis.response.session = Some(id.clone());
        if analysis.prepared.image.is_some() {
            analysis.response.heatmaps = Some(HeatmapRefs {
                image: format!("/sessions/{id}/image.png"),
                logprob: format!("/sessions/{id}/heatmap/logprob.png"),
                avg_attention: format!("/sessions/{id}/heatmap/avg-attention.png"),
            });
        }
        let response = analysis.response.clone();
        st.sessions.insert(id, Arc::new(analysis));
        Ok(response)
    })
    .await?;
    Ok(Json(response).into_response())
}

async fn probe_route(State(state): State<Arc<AppState>>, body: Bytes) -> ApiResult<Response> {
    let body: ProbeBody = serde_json::from_slice(&body).map_err(ApiError::malformed)?;
    let analysis = session(&state, &body.session)?;
    let out = blocking(move || Ok(analysis.probe(&body.probe)?)).await?;
    Ok(Json(out).into_response())
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response()
}

async fn image_route(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Response> {
    let analysis = session(&state, &id)?;
    let img =
        analysis.prepared.image.as_ref().ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, "not-found", "session has no image")
        })?;
    Ok(png(encode_png(img)?))
}

#[derive(Debug, Deserialize)]
struct HeatmapQuery {
    #[serde(default)]
    scale: Option<String>,
}

async fn heatmap_route(
    State(state): State<Arc<AppState>>,
    Path((id, file)): Path<(String, String)>,
    Query(q): Query<HeatmapQuery>,
) -> ApiResult<Response> {
    let method = match file.trim_end_matches(".png") {
        "logprob" => MapMethod::Logprob,
        "avg-attention" => MapMethod::AvgAttention,
        other => {
            return Err(ApiError::new(
                StatusCode::NOT_FOUND,
                "not-found",
                format!("no heatmap `{other}`"),
            ))
        }
    };
    let shared = match q.scale.as_deref() {
        None | Some("image") => false,
        Some("shared") => true,
        Some(s) => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "input",
                format!("scale `{s}` is not `image` or `shared`"),
            )
            .field("scale"))
        }
    };
    let analysis = session(&state, &id)?;
    let render = blocking(move || {
        analysis.heatmap(method, shared)?.ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, "not-found", "session has no image")
        })
    })
    .await?;
    Ok(png(render.blended_png()?))
}

async fn models_route(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "default": state.config.default_model,
        "models": state.registry.ids(),
    }))
}

async fn health_route() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn log_requests(req: Request, next: Next) -> Response {
    let (method, path) = (req.method().clone(), req.uri().path().to_owned());
    let t = Instant::now();
    let res = next.run(req).await;
    tracing::info!(%method, %path, status = res.status().as_u16(), ms = t.elapsed().as_secs_f64() * 1e3, "request");
    res
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/analyze", post(analyze_route))
        .route("/probe", post(probe_route))
        .route("/sessions/{id}/image.png", get(image_route))
        .route("/sessions/{id}/heatmap/{file}", get(heatmap_route))
        .route("/models", get(models_route))
        .route("/health", get(health_route))
        .layer(middleware::from_fn(log_requests))
        .with_state(state)
}

/// Serves until interrupted.
pub async fn serve(config: ServiceConfig) -> patchlens_core::Result<()> {
    let bind = config.bind.clone();
    let state = Arc::new(AppState::new(config)?);
    let listener = tokio::net::TcpListener::bind(&bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

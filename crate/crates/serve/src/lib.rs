//! HTTP inference API over a loaded checkpoint.
//!
//! | route            | body                      | reply                  |
//! |------------------|---------------------------|------------------------|
//! | `GET /meta`      |                           | faces, sizes, hash     |
//! | `POST /encode`   | `{vertices}`              | `{mu, logvar}`         |
//! | `POST /decode`   | `{z_shape, z_pose}`       | `{vertices}`           |
//! | `POST /transfer` | `{shape_from, pose_from}` | `{vertices}`           |
//! | `GET /sample`    | `?n=&seed=`               | `{samples}`            |
//!
//! Every reply, errors included, is JSON carrying `model_hash`, which is
//! also sent as the `x-model-hash` header. Vertices are `[[x, y, z], ...]`
//! on the checkpoint's template, in the same units as the training data.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::BytesRejection;
use axum::extract::{DefaultBodyLimit, Query, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dismesh_core::autograd::AutogradError;
use dismesh_core::checkpoint::Checkpoint;
use dismesh_core::mesh::Face;
use dismesh_core::model::ModelError;
use dismesh_core::tasks::{self, TaskError};
use dismesh_core::{LatentCode, MeshVae, TriangleMesh};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::catch_panic::CatchPanicLayer;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub const DEFAULT_PORT: u16 = 8080;
pub const MAX_BODY_BYTES: usize = 8 * 1024 * 1024;
pub const MAX_SAMPLES: usize = 256;
pub const MODEL_HASH_HEADER: &str = "x-model-hash";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub host: String,
    pub port: u16,
    /// Allowed CORS origins; `"*"` allows any.
    pub cors_origins: Vec<String>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: DEFAULT_PORT,
            cors_origins: vec!["*".into()],
        }
    }
}

struct AppState {
    model: MeshVae<f32>,
    template: TriangleMesh,
    model_hash: String,
}

type Shared = Arc<AppState>;

/// Error reply: `{error, field?, model_hash}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn bad(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            field: Some(field.into()),
        }
    }

    fn internal(detail: impl std::fmt::Display) -> Self {
        log::error!("request failed: {detail}");
        Self {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: "internal error".into(),
            field: None,
        }
    }
}

fn reply(state: &AppState, status: StatusCode, mut body: Value) -> Response {
    body["model_hash"] = Value::String(state.model_hash.clone());
    let mut resp = (status, Json(body)).into_response();
    if let Ok(v) = HeaderValue::from_str(&state.model_hash) {
        resp.headers_mut().insert(MODEL_HASH_HEADER, v);
    }
    resp
}

fn error_reply(state: &AppState, e: ApiError) -> Response {
    let mut body = json!({ "error": e.message });
    if let Some(f) = e.field {
        body["field"] = Value::String(f);
    }
    reply(state, e.status, body)
}

fn respond(state: &AppState, result: Result<Value, ApiError>) -> Response {
    match result {
        Ok(v) => reply(state, StatusCode::OK, v),
        Err(e) => error_reply(state, e),
    }
}

fn parse<T: DeserializeOwned>(body: Result<Bytes, BytesRejection>) -> Result<T, ApiError> {
    let bytes = body.map_err(|r| ApiError {
        status: if r.status() == StatusCode::PAYLOAD_TOO_LARGE {
            StatusCode::PAYLOAD_TOO_LARGE
        } else {
            StatusCode::BAD_REQUEST
        },
        message: r.body_text(),
        field: None,
    })?;
    let de = &mut serde_json::Deserializer::from_slice(&bytes);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." { "body".to_string() } else { path };
        ApiError::bad(field, e.inner().to_string())
    })
}

fn mesh_from(state: &AppState, field: &str, vertices: Vec<[f64; 3]>) -> Result<TriangleMesh, ApiError> {
    let n = state.template.vertex_count();
    if vertices.len() != n {
        return Err(ApiError::bad(field, format!("expected {n} vertices, got {}", vertices.len())));
    }
    state.template.with_vertices(vertices).map_err(|e| ApiError::bad(field, e.to_string()))
}

fn model_err(e: ModelError) -> ApiError {
    match e {
        ModelError::Dimension { what, expected, found } if what == "z_shape" || what == "z_pose" => {
            ApiError::bad(what, format!("expected length {expected}, got {found}"))
        }
        ModelError::Autograd(AutogradError::NonFinite { .. }) => {
            ApiError::bad("body", "input produces non-finite values")
        }
        other => ApiError::internal(other),
    }
}

fn task_err(e: TaskError) -> ApiError {
    match e {
        TaskError::Model(m) => model_err(m),
        other => ApiError::internal(other),
    }
}

async fn blocking<F>(state: Shared, f: F) -> Response
where
    F: FnOnce(&AppState) -> Result<Value, ApiError> + Send + 'static,
{
    let s = state.clone();
    let result = tokio::task::spawn_blocking(move || f(&s))
        .await
        .unwrap_or_else(|e| Err(ApiError::internal(e)));
    respond(&state, result)
}

async fn meta(State(state): State<Shared>) -> Response {
    let cfg = state.model.config();
    let faces: &[Face] = state.model.faces();
    let body = json!({
        "faces": faces,
        "n_vertices": state.model.vertex_count(),
        "d_s": cfg.latent_shape,
        "d_p": cfg.latent_pose,
        "template": state.template.vertices(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    reply(&state, StatusCode::OK, body)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodeRequest {
    vertices: Vec<[f64; 3]>,
}

async fn encode(State(state): State<Shared>, body: Result<Bytes, BytesRejection>) -> Response {
    let req: EncodeRequest = match parse(body) {
        Ok(r) => r,
        Err(e) => return error_reply(&state, e),
    };
    blocking(state, move |s| {
        let mesh = mesh_from(s, "vertices", req.vertices)?;
        let post = s.model.encode(&[&mesh]).map_err(model_err)?.remove(0);
        Ok(json!({ "mu": post.mu, "logvar": post.clamped_logvar() }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecodeRequest {
    z_shape: Vec<f64>,
    z_pose: Vec<f64>,
}

async fn decode(State(state): State<Shared>, body: Result<Bytes, BytesRejection>) -> Response {
    let req: DecodeRequest = match parse(body) {
        Ok(r) => r,
        Err(e) => return error_reply(&state, e),
    };
    blocking(state, move |s| {
        let code = LatentCode {
            z_shape: req.z_shape,
            z_pose: req.z_pose,
        };
        s.model.check_code(&code).map_err(model_err)?;
        let v = s.model.decode(&[code]).map_err(model_err)?.remove(0);
        Ok(json!({ "vertices": v }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TransferRequest {
    shape_from: Vec<[f64; 3]>,
    pose_from: Vec<[f64; 3]>,
}

async fn transfer(State(state): State<Shared>, body: Result<Bytes, BytesRejection>) -> Response {
    let req: TransferRequest = match parse(body) {
        Ok(r) => r,
        Err(e) => return error_reply(&state, e),
    };
    blocking(state, move |s| {
        let a = mesh_from(s, "shape_from", req.shape_from)?;
        let b = mesh_from(s, "pose_from", req.pose_from)?;
        let out = tasks::transfer(&s.model, &a, &b).map_err(task_err)?;
        Ok(json!({ "vertices": out.vertices() }))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleQuery {
    n: Option<String>,
    seed: Option<String>,
}

async fn sample(State(state): State<Shared>, query: Result<Query<SampleQuery>, axum::extract::rejection::QueryRejection>) -> Response {
    let q = match query {
        Ok(Query(q)) => q,
        Err(e) => return error_reply(&state, ApiError::bad("query", e.body_text())),
    };
    let n = match q.n.as_deref().map(str::parse::<usize>) {
        None => 1,
        Some(Ok(n)) if (1..=MAX_SAMPLES).contains(&n) => n,
        _ => return error_reply(&state, ApiError::bad("n", format!("must be an integer in 1..={MAX_SAMPLES}"))),
    };
    let seed = match q.seed.as_deref().map(str::parse::<u64>) {
        None => 0,
        Some(Ok(s)) => s,
        Some(Err(_)) => return error_reply(&state, ApiError::bad("seed", "must be a non-negative integer")),
    };
    blocking(state, move |s| {
        let out = tasks::sample_prior(&s.model, n, seed, &[]).map_err(task_err)?;
        let samples: Vec<&[[f64; 3]]> = out.meshes.iter().map(|m| m.vertices()).collect();
        Ok(json!({ "samples": samples, "n": n, "seed": seed }))
    })
    .await
}

fn cors(origins: &[String]) -> Result<CorsLayer, String> {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
        .allow_headers([header::CONTENT_TYPE])
        .expose_headers([header::HeaderName::from_static(MODEL_HASH_HEADER)]);
    if origins.iter().any(|o| o == "*") {
        return Ok(layer.allow_origin(Any));
    }
    let list = origins
        .iter()
        .map(|o| HeaderValue::from_str(o).map_err(|_| format!("invalid CORS origin {o:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(layer.allow_origin(AllowOrigin::list(list)))
}

/// Builds the application for `checkpoint`.
pub fn router(checkpoint: Checkpoint, config: &ServeConfig) -> Result<Router, String> {
    let state = Arc::new(AppState {
        model_hash: checkpoint.model_hash(),
        model: checkpoint.model,
        template: checkpoint.template,
    });
    let panic_state = state.clone();
    let on_panic = move |_: Box<dyn std::any::Any + Send>| {
        error_reply(&panic_state, ApiError::internal("handler panicked"))
    };
    let fallback_state = state.clone();
    Ok(Router::new()
        .route("/meta", get(meta))
        .route("/encode", post(encode))
        .route("/decode", post(decode))
        .route("/transfer", post(transfer))
        .route("/sample", get(sample))
        .fallback(move || {
            let s = fallback_state.clone();
            async move {
                error_reply(
                    &s,
                    ApiError {
                        status: StatusCode::NOT_FOUND,
                        message: "no such route".into(),
                        field: None,
                    },
                )
            }
        })
        .with_state(state)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .layer(CatchPanicLayer::custom(on_panic))
        .layer(cors(&config.cors_origins)?))
}

/// Serves until the process is stopped.
pub async fn serve(checkpoint: Checkpoint, config: &ServeConfig) -> std::io::Result<()> {
    let app = router(checkpoint, config).map_err(std::io::Error::other)?;
    let addr: SocketAddr = format!("{}:{}", config.host, config.port)
        .parse()
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidInput, e))?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app).await
}

//! HTTP API for reference-guided enhancement.
//!
//! | route | result |
//! |---|---|
//! | `GET /health` | `{"status":"ok","ckpt":..,"arch":..}`, 503 while the model loads |
//! | `GET /references` | library entries sorted by mean V, thumbnails as base64 PNG |
//! | `POST /enhance` | multipart `low` plus `ref_id` or `ref`; PNG body, `x-mean-v` header |
//! | `GET /session` | recent results, only when the session cache is enabled |

mod library;

use std::collections::{HashMap, VecDeque};
use std::future::IntoFuture;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, OnceLock};

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Multipart, State};
use axum::http::{header, HeaderValue, Method, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use relight::checkpoint::load_model;
use relight::imaging::{decode_image, encode_png, mean_value};
use relight::model::{encode_padded, enhance_with_luminance, ModelParams};
use serde_json::json;
use tower_http::cors::{AllowOrigin, Any, CorsLayer};

pub use library::{load_library, thumbnail_png, Reference, ReferenceEntry, THUMBNAIL_SIDE};

pub const MEAN_V_HEADER: &str = "x-mean-v";
pub const DEFAULT_MAX_UPLOAD_MB: usize = 16;

#[derive(Clone, Debug)]
pub struct ServeConfig {
    pub ckpt: PathBuf,
    pub refs: PathBuf,
    pub host: String,
    pub port: u16,
    pub max_upload_bytes: usize,
    /// `None` allows any origin.
    pub cors_origin: Option<String>,
    /// Keep this many recent results in memory for `GET /session`; 0 disables.
    pub session_cache: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            ckpt: PathBuf::from("final.ckpt"),
            refs: PathBuf::from("refs"),
            host: "127.0.0.1".into(),
            port: 8080,
            max_upload_bytes: DEFAULT_MAX_UPLOAD_MB << 20,
            cors_origin: None,
            session_cache: 0,
        }
    }
}

/// Model weights plus each library reference's luminance span.
pub struct LoadedModel {
    pub ckpt_id: String,
    pub params: ModelParams,
    pub luminance: HashMap<String, Vec<f32>>,
}

impl LoadedModel {
    pub fn new(ckpt_id: impl Into<String>, params: ModelParams, library: &[Reference]) -> relight::Result<Self> {
        let mut luminance = HashMap::with_capacity(library.len());
        for r in library {
            let enc = encode_padded(&r.image, &params)?;
            luminance.insert(r.id.clone(), enc.latent.luminance().to_vec());
        }
        Ok(Self { ckpt_id: ckpt_id.into(), params, luminance })
    }
}

#[derive(Clone, Debug, serde::Serialize)]
struct SessionItem {
    reference: String,
    mean_v: f64,
    png: String,
}

/// Shared, read-only after the model is installed (apart from the opt-in
/// session cache).
pub struct AppState {
    model: OnceLock<LoadedModel>,
    library: Vec<Reference>,
    session: Option<Mutex<VecDeque<SessionItem>>>,
    session_cap: usize,
}

impl AppState {
    pub fn new(library: Vec<Reference>, session_cache: usize) -> Arc<Self> {
        Arc::new(Self {
            model: OnceLock::new(),
            library,
            session: (session_cache > 0).then(|| Mutex::new(VecDeque::new())),
            session_cap: session_cache,
        })
    }

    /// Installs the model; later calls are ignored.
    pub fn install(&self, model: LoadedModel) {
        let _ = self.model.set(model);
    }

    pub fn is_ready(&self) -> bool {
        self.model.get().is_some()
    }

    pub fn library(&self) -> &[Reference] {
        &self.library
    }
}

fn error_response(status: StatusCode, kind: &str, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": kind, "message": message.into() }))).into_response()
}

fn core_error_response(e: relight::Error) -> Response {
    let status = match e {
        relight::Error::Decode { .. } | relight::Error::Dimension(_) | relight::Error::Argument(_) => {
            StatusCode::BAD_REQUEST
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    error_response(status, e.kind(), e.to_string())
}

async fn health(State(state): State<Arc<AppState>>) -> Response {
    match state.model.get() {
        Some(m) => Json(json!({
            "status": "ok",
            "ckpt": m.ckpt_id,
            "arch": m.params.arch().summary(),
        }))
        .into_response(),
        None => (StatusCode::SERVICE_UNAVAILABLE, Json(json!({ "status": "loading" }))).into_response(),
    }
}

async fn references(State(state): State<Arc<AppState>>) -> Json<Vec<ReferenceEntry>> {
    Json(state.library.iter().map(Reference::entry).collect())
}

enum RefChoice {
    Id(String),
    Upload(Bytes),
}

async fn read_form(mut form: Multipart) -> Result<(Bytes, RefChoice), Response> {
    let mut low = None;
    let mut ref_id = None;
    let mut ref_file = None;
    loop {
        let field = match form.next_field().await {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) => return Err(error_response(e.status(), "multipart", e.body_text())),
        };
        let name = field.name().unwrap_or_default().to_string();
        let data = field.bytes().await.map_err(|e| error_response(e.status(), "multipart", e.body_text()))?;
        match name.as_str() {
            "low" => low = Some(data),
            "ref_id" => ref_id = Some(String::from_utf8_lossy(&data).trim().to_string()),
            "ref" => ref_file = Some(data),
            other => log::debug!("ignoring multipart field {other:?}"),
        }
    }
    let low = low.ok_or_else(|| error_response(StatusCode::BAD_REQUEST, "argument", "missing field `low`"))?;
    let choice = match (ref_id, ref_file) {
        (Some(id), None) => RefChoice::Id(id),
        (None, Some(bytes)) => RefChoice::Upload(bytes),
        (Some(_), Some(_)) => {
            return Err(error_response(StatusCode::BAD_REQUEST, "argument", "send either `ref_id` or `ref`, not both"))
        }
        (None, None) => {
            return Err(error_response(StatusCode::BAD_REQUEST, "argument", "one of `ref_id` or `ref` is required"))
        }
    };
    Ok((low, choice))
}

async fn enhance_route(State(state): State<Arc<AppState>>, form: Multipart) -> Response {
    let (low_bytes, choice) = match read_form(form).await {
        Ok(v) => v,
        Err(r) => return r,
    };
    if !state.is_ready() {
        return error_response(StatusCode::SERVICE_UNAVAILABLE, "loading", "model is still loading");
    }
    if let RefChoice::Id(id) = &choice {
        if !state.library.iter().any(|r| &r.id == id) {
            return error_response(StatusCode::NOT_FOUND, "not_found", format!("unknown reference id {id:?}"));
        }
    }
    let worker = state.clone();
    let result = tokio::task::spawn_blocking(move || -> relight::Result<(Vec<u8>, f64, String)> {
        let model = worker.model.get().expect("checked above");
        let low = decode_image(&low_bytes)?;
        let (label, lum) = match choice {
            RefChoice::Id(id) => {
                let lum = model.luminance[&id].clone();
                (id, lum)
            }
            RefChoice::Upload(bytes) => {
                let img = decode_image(&bytes)?;
                let enc = encode_padded(&img, &model.params)?;
                ("upload".to_string(), enc.latent.luminance().to_vec())
            }
        };
        let out = enhance_with_luminance(&low, &lum, &model.params)?;
        Ok((encode_png(&out), mean_value(&out), label))
    })
    .await;
    let (png, mean_v, label) = match result {
        Ok(Ok(v)) => v,
        Ok(Err(e)) => return core_error_response(e),
        Err(e) => return error_response(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    };
    if let Some(session) = &state.session {
        let mut s = session.lock().expect("session lock");
        s.push_back(SessionItem {
            reference: label,
            mean_v,
            png: base64::engine::general_purpose::STANDARD.encode(&png),
        });
        while s.len() > state.session_cap {
            s.pop_front();
        }
    }
    let mut resp = (StatusCode::OK, [(header::CONTENT_TYPE, "image/png")], png).into_response();
    resp.headers_mut().insert(MEAN_V_HEADER, HeaderValue::from_str(&mean_v.to_string()).expect("ascii number"));
    resp
}

async fn session(State(state): State<Arc<AppState>>) -> Response {
    match &state.session {
        Some(s) => Json(s.lock().expect("session lock").iter().cloned().collect::<Vec<_>>()).into_response(),
        None => error_response(StatusCode::NOT_FOUND, "not_found", "session cache is disabled"),
    }
}

fn cors(origin: Option<&str>) -> CorsLayer {
    let layer = CorsLayer::new()
        .allow_methods([Method::GET, Method::POST])
        .allow_headers(Any)
        .expose_headers([header::HeaderName::from_static(MEAN_V_HEADER)]);
    match origin.and_then(|o| HeaderValue::from_str(o).ok()) {
        Some(o) => layer.allow_origin(AllowOrigin::exact(o)),
        None => layer.allow_origin(Any),
    }
}

/// Builds the router. Request bodies above `max_upload_bytes` get 413.
pub fn app(state: Arc<AppState>, max_upload_bytes: usize, cors_origin: Option<&str>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/references", get(references))
        .route("/enhance", post(enhance_route))
        .route("/session", get(session))
        .layer(DefaultBodyLimit::max(max_upload_bytes))
        .layer(cors(cors_origin))
        .with_state(state)
}

/// Loads the library, starts listening, and loads the model in the
/// background; `/health` answers 503 until it is ready.
pub async fn serve(cfg: ServeConfig) -> relight::Result<()> {
    let library = load_library(&cfg.refs)?;
    log::info!("loaded {} references from {}", library.len(), cfg.refs.display());
    let state = AppState::new(library, cfg.session_cache);
    let addr: SocketAddr = format!("{}:{}", cfg.host, cfg.port)
        .parse()
        .map_err(|e| relight::Error::Argument(format!("bad listen address: {e}")))?;
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| relight::Error::Io {
        path: PathBuf::from(addr.to_string()),
        source: e,
    })?;

    let loader = state.clone();
    let ckpt = cfg.ckpt.clone();
    let load = tokio::task::spawn_blocking(move || -> relight::Result<()> {
        let params = load_model(&ckpt)?;
        let id = ckpt.file_name().map_or_else(|| ckpt.display().to_string(), |n| n.to_string_lossy().into_owned());
        loader.install(LoadedModel::new(id, params, loader.library())?);
        log::info!("model {} ready", ckpt.display());
        Ok(())
    });

    log::info!("listening on {addr}");
    let router = app(state, cfg.max_upload_bytes, cfg.cors_origin.as_deref());
    let server = axum::serve(listener, router).with_graceful_shutdown(async {
        let _ = tokio::signal::ctrl_c().await;
    });
    let server = tokio::spawn(server.into_future());
    match load.await {
        Ok(Ok(())) => {}
        Ok(Err(e)) => {
            server.abort();
            return Err(e);
        }
        Err(e) => {
            server.abort();
            return Err(relight::Error::Numeric(format!("model loader panicked: {e}")));
        }
    }
    match server.await {
        Ok(r) => r.map_err(|e| relight::Error::Io { path: PathBuf::from(addr.to_string()), source: e }),
        Err(e) => Err(relight::Error::Numeric(format!("server task failed: {e}"))),
    }
}

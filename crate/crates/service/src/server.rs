//! HTTP adapter over per-owner engines.
//!
//! Each owner has one engine behind a mutex. Mutating requests take it with
//! `try_lock`, so a second request for a busy owner gets `409`. Engine work
//! runs on the blocking pool because the model clients are synchronous.

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::sync::{Arc, Mutex, TryLockError};

use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderMap, HeaderValue, Method, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{info, warn};

use rmm_core::agent_loop::{AgentError, Clients, Engine};

use crate::config::RuntimeConfig;

pub type ClientFactory = Arc<dyn Fn(&str) -> Result<Clients, String> + Send + Sync>;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn busy(owner: &str) -> Self {
        Self::new(StatusCode::CONFLICT, "busy", format!("a request for owner {owner} is in progress"))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

impl From<AgentError> for ApiError {
    fn from(e: AgentError) -> Self {
        let (status, code) = match &e {
            AgentError::NoActiveSession | AgentError::UnknownSession(_) => (StatusCode::NOT_FOUND, "unknown_session"),
            AgentError::AlreadyClosed(_) => (StatusCode::CONFLICT, "already_closed"),
            AgentError::SessionAlreadyActive(_) => (StatusCode::CONFLICT, "session_already_active"),
            AgentError::EmptyQuery => (StatusCode::BAD_REQUEST, "empty_query"),
            AgentError::InvalidConfig(_) => (StatusCode::BAD_REQUEST, "invalid_config"),
            AgentError::Bank(rmm_core::memory_bank::BankError::ZeroK) => (StatusCode::BAD_REQUEST, "zero_k"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult = Result<(StatusCode, Json<Value>), ApiError>;

pub struct AppState {
    config: RuntimeConfig,
    factory: ClientFactory,
    engines: Mutex<HashMap<String, Arc<Mutex<Engine>>>>,
    sessions: Mutex<HashMap<String, String>>,
    replies: Mutex<HashMap<String, (StatusCode, Value)>>,
}

fn valid_owner(owner: &str) -> bool {
    !owner.is_empty()
        && owner != "agent"
        && owner.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl AppState {
    pub fn new(config: RuntimeConfig) -> Arc<Self> {
        let cfg = config.clone();
        let factory: ClientFactory = Arc::new(move |_owner| cfg.clients().map_err(|e| e.to_string()));
        Self::with_factory(config, factory)
    }

    /// State whose engines get their model clients from `factory`.
    pub fn with_factory(config: RuntimeConfig, factory: ClientFactory) -> Arc<Self> {
        Arc::new(Self {
            config,
            factory,
            engines: Mutex::new(HashMap::new()),
            sessions: Mutex::new(HashMap::new()),
            replies: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &RuntimeConfig {
        &self.config
    }

    /// The owner's engine, opening it from the data directory on first use.
    pub fn engine(&self, owner: &str) -> Result<Arc<Mutex<Engine>>, ApiError> {
        if !valid_owner(owner) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "invalid_owner", format!("invalid owner {owner:?}")));
        }
        let mut engines = self.engines.lock().expect("engine map");
        if let Some(e) = engines.get(owner) {
            return Ok(e.clone());
        }
        let clients = (self.factory)(owner).map_err(ApiError::internal)?;
        let engine = Engine::open(
            self.config.agent_for(Some(owner)),
            clients,
            self.config.new_clock(),
            Some(self.config.owner_paths(owner)),
        )?;
        let e = Arc::new(Mutex::new(engine));
        engines.insert(owner.to_owned(), e.clone());
        Ok(e)
    }

    /// Opens every owner found under the data directory.
    pub fn preload(&self) -> Result<usize, ApiError> {
        let root = self.config.data_dir.join("owners");
        let Ok(dir) = std::fs::read_dir(&root) else { return Ok(0) };
        let mut n = 0;
        for entry in dir.flatten() {
            if entry.path().is_dir() {
                self.engine(&entry.file_name().to_string_lossy())?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Checkpoints every open engine, waiting for in-flight turns.
    pub fn checkpoint_all(&self) {
        let engines: Vec<(String, Arc<Mutex<Engine>>)> =
            self.engines.lock().expect("engine map").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        for (owner, e) in engines {
            let guard = e.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(err) = guard.checkpoint() {
                warn!(%owner, error = %err, "checkpoint failed");
            }
        }
    }

    fn owner_of(&self, session_id: &str) -> Result<String, ApiError> {
        self.sessions.lock().expect("session map").get(session_id).cloned().ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, "unknown_session", format!("unknown session {session_id}"))
        })
    }
}

/// Runs `f` on the owner's engine on the blocking pool. `exclusive` requests
/// fail fast with `409` when the engine is busy; others wait.
async fn on_engine<T, F>(state: Arc<AppState>, owner: String, exclusive: bool, f: F) -> Result<Value, ApiError>
where
    T: Serialize,
    F: FnOnce(&mut Engine) -> Result<T, ApiError> + Send + 'static,
{
    tokio::task::spawn_blocking(move || {
        let engine = state.engine(&owner)?;
        let mut guard = if exclusive {
            match engine.try_lock() {
                Ok(g) => g,
                Err(TryLockError::WouldBlock) => return Err(ApiError::busy(&owner)),
                Err(TryLockError::Poisoned(_)) => return Err(ApiError::internal("engine poisoned")),
            }
        } else {
            engine.lock().map_err(|_| ApiError::internal("engine poisoned"))?
        };
        let out = f(&mut guard)?;
        serde_json::to_value(out).map_err(|e| ApiError::internal(e.to_string()))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

/// Replays the stored reply for a repeated idempotency key.
async fn idempotent<Fut>(state: &AppState, headers: &HeaderMap, route: String, status: StatusCode, run: Fut) -> ApiResult
where
    Fut: Future<Output = Result<Value, ApiError>>,
{
    let key = headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(|k| format!("{route} {k}"));
    if let Some(k) = &key {
        if let Some((s, v)) = state.replies.lock().expect("reply cache").get(k) {
            return Ok((*s, Json(v.clone())));
        }
    }
    let value = run.await?;
    if let Some(k) = key {
        state.replies.lock().expect("reply cache").insert(k, (status, value.clone()));
    }
    Ok((status, Json(value)))
}

#[derive(Debug, Default, Deserialize)]
pub struct CreateSession {
    pub owner: Option<String>,
}

async fn create_session(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Option<Json<CreateSession>>) -> ApiResult {
    let owner = body.and_then(|b| b.0.owner).unwrap_or_else(|| state.config.agent.owner.clone());
    let s = state.clone();
    idempotent(&state, &headers, "POST /v1/sessions".into(), StatusCode::CREATED, async move {
        let o = owner.clone();
        let v = on_engine(s.clone(), owner, true, |e| e.start_session().map_err(ApiError::from)).await?;
        if let Some(id) = v["session_id"].as_str() {
            s.sessions.lock().expect("session map").insert(id.to_owned(), o);
        }
        Ok(v)
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct PostMessage {
    pub text: String,
}

async fn post_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(body): Json<PostMessage>,
) -> ApiResult {
    let owner = state.owner_of(&id)?;
    let route = format!("POST /v1/sessions/{id}/messages");
    let s = state.clone();
    idempotent(&state, &headers, route, StatusCode::OK, async move {
        on_engine(s, owner, true, move |e| e.run_turn(&id, &body.text).map_err(ApiError::from)).await
    })
    .await
}

async fn end_session(State(state): State<Arc<AppState>>, Path(id): Path<String>, headers: HeaderMap) -> ApiResult {
    let owner = state.owner_of(&id)?;
    let route = format!("DELETE /v1/sessions/{id}");
    let s = state.clone();
    idempotent(&state, &headers, route, StatusCode::OK, async move {
        on_engine(s, owner, true, move |e| e.end_session(&id).map_err(ApiError::from)).await
    })
    .await
}

#[derive(Debug, Deserialize)]
pub struct SearchParams {
    pub q: String,
    pub k: Option<usize>,
    pub owner: Option<String>,
}

async fn search(State(state): State<Arc<AppState>>, Query(p): Query<SearchParams>) -> ApiResult {
    let owner = p.owner.unwrap_or_else(|| state.config.agent.owner.clone());
    let k = p.k.unwrap_or(5);
    let v = on_engine(state, owner, false, move |e| {
        e.bank().search_text(e.embedder(), &p.q, k).map_err(|b| ApiError::from(AgentError::Bank(b)))
    })
    .await?;
    Ok((StatusCode::OK, Json(v)))
}

#[derive(Debug, Deserialize)]
pub struct OwnerParam {
    pub owner: Option<String>,
}

async fn get_entry(State(state): State<Arc<AppState>>, Path(entry_id): Path<String>, Query(p): Query<OwnerParam>) -> ApiResult {
    let owner = p.owner.unwrap_or_else(|| state.config.agent.owner.clone());
    let v = on_engine(state, owner, false, move |e| {
        e.bank().get(&entry_id).cloned().ok_or_else(|| {
            ApiError::new(StatusCode::NOT_FOUND, "unknown_entry", format!("unknown entry {entry_id}"))
        })
    })
    .await?;
    Ok((StatusCode::OK, Json(v)))
}

async fn metrics(State(state): State<Arc<AppState>>, Query(p): Query<OwnerParam>) -> ApiResult {
    if let Some(owner) = p.owner {
        let v = on_engine(state, owner, false, |e| Ok(e.metrics())).await?;
        return Ok((StatusCode::OK, Json(v)));
    }
    let engines: Vec<(String, Arc<Mutex<Engine>>)> =
        state.engines.lock().expect("engine map").iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let v = tokio::task::spawn_blocking(move || {
        let mut out = BTreeMap::new();
        for (owner, e) in engines {
            let m = e.lock().map_err(|_| ApiError::internal("engine poisoned"))?.metrics();
            out.insert(owner, m);
        }
        Ok::<_, ApiError>(json!({ "owners": out }))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((StatusCode::OK, Json(v)))
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

async fn echo_seed(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    let mut resp = next.run(req).await;
    if let Ok(v) = HeaderValue::from_str(&state.config.agent.seed.to_string()) {
        resp.headers_mut().insert("x-rmm-seed", v);
    }
    resp
}

async fn fallback(method: Method) -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no route for {method}"))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/{id}", delete(end_session))
        .route("/v1/sessions/{id}/messages", post(post_message))
        .route("/v1/memory/search", get(search))
        .route("/v1/memory/{entry_id}", get(get_entry))
        .route("/v1/metrics", get(metrics))
        .route("/healthz", get(healthz))
        .fallback(fallback)
        .layer(middleware::from_fn_with_state(state.clone(), echo_seed))
        .with_state(state)
}

/// Serves until `shutdown` resolves, then checkpoints every engine.
pub async fn serve(
    state: Arc<AppState>,
    listener: tokio::net::TcpListener,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    info!(addr = %listener.local_addr()?, "serving");
    axum::serve(listener, router(state.clone())).with_graceful_shutdown(shutdown).await?;
    let s = state.clone();
    tokio::task::spawn_blocking(move || s.checkpoint_all()).await.map_err(std::io::Error::other)?;
    info!("checkpointed and stopped");
    Ok(())
}

#[derive(Debug, thiserror::Error)]
pub enum ServeError {
    #[error("config: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: std::io::Error },
    #[error("refusing to serve, stored state is unreadable: {0}")]
    StoreCorruption(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Checks the data directory, loads stored owners, binds, and serves until
/// interrupted.
pub async fn run(config: RuntimeConfig) -> Result<(), ServeError> {
    config.ensure_data_dir()?;
    let state = AppState::new(config.clone());
    let loaded = state.clone();
    let n = tokio::task::spawn_blocking(move || loaded.preload())
        .await
        .map_err(std::io::Error::other)?
        .map_err(|e| ServeError::StoreCorruption(e.message))?;
    info!(owners = n, "stores loaded");
    let listener = tokio::net::TcpListener::bind(&config.bind)
        .await
        .map_err(|source| ServeError::BindFailure { addr: config.bind.clone(), source })?;
    serve(state, listener, shutdown_signal()).await?;
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        if let Ok(mut s) = tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            s.recv().await;
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

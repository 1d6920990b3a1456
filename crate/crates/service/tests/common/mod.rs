#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use rmm_core::agent_loop::{Clients, Engine};
use rmm_core::clock::LogicalClock;
use rmm_core::llm::{LlmClient, LlmClientKind, LlmError};
use rmm_core::mock::MockGenerator;
use rmm_service::config::{ClockKind, RuntimeConfig};
use rmm_service::server::{serve, AppState, ClientFactory};
use serde_json::Value;
use tokio::sync::oneshot;
use tokio::task::JoinHandle;

pub fn config(dir: &Path) -> RuntimeConfig {
    let mut cfg = RuntimeConfig::default();
    cfg.data_dir = dir.to_owned();
    cfg.clock = ClockKind::Logical;
    cfg.agent.owner = "alice".into();
    cfg.agent.seed = 11;
    cfg.embedder.dimension = 256;
    cfg
}

/// The engine the service would open for `owner`, built directly.
pub fn direct_engine(cfg: &RuntimeConfig, owner: &str, dir: &Path) -> Engine {
    Engine::open(
        cfg.agent_for(Some(owner)),
        cfg.clients().unwrap(),
        Arc::new(LogicalClock::new()),
        Some(rmm_core::agent_loop::StorePaths::new(dir.join("owners").join(owner))),
    )
    .unwrap()
}

/// A generator that answers like the mock after a pause.
pub struct SlowGenerator {
    inner: MockGenerator,
    delay: Duration,
}

impl SlowGenerator {
    pub fn new(delay: Duration) -> Self {
        Self { inner: MockGenerator::new(), delay }
    }
}

impl LlmClient for SlowGenerator {
    fn client_id(&self) -> &str {
        "slow-generator"
    }

    fn kind(&self) -> LlmClientKind {
        LlmClientKind::MockGenerator
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        std::thread::sleep(self.delay);
        self.inner.complete(prompt)
    }

    fn call_count(&self) -> usize {
        self.inner.call_count()
    }
}

pub fn slow_factory(cfg: RuntimeConfig, delay: Duration) -> ClientFactory {
    Arc::new(move |_| {
        let mut c: Clients = cfg.clients().map_err(|e| e.to_string())?;
        c.generator = Arc::new(SlowGenerator::new(delay));
        Ok(c)
    })
}

pub struct Running {
    pub base: String,
    pub state: Arc<AppState>,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<JoinHandle<std::io::Result<()>>>,
}

impl Running {
    pub async fn start(state: Arc<AppState>) -> Self {
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        let (tx, rx) = oneshot::channel::<()>();
        let handle = tokio::spawn(serve(state.clone(), listener, async move {
            let _ = rx.await;
        }));
        Self { base, state, stop: Some(tx), handle: Some(handle) }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn stop(mut self) {
        if let Some(tx) = self.stop.take() {
            let _ = tx.send(());
        }
        if let Some(h) = self.handle.take() {
            h.await.unwrap().unwrap();
        }
    }
}

/// Removes wall-clock timings so results can be compared.
pub fn without_timing(mut v: Value) -> Value {
    if let Some(o) = v.as_object_mut() {
        o.remove("timing");
    }
    v
}

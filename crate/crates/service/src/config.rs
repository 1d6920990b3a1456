//! Runtime configuration: a TOML file with `RMM_*` environment overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use rmm_core::agent_loop::{AgentConfig, AgentMode, Clients, StorePaths};
use rmm_core::clock::{Clock, LogicalClock, SystemClock};
use rmm_core::embedding::{Embedder, EmbedderConfig, HashingEmbedder, Normalization, RemoteEmbedder};
use rmm_core::eval::MetricFloors;
use rmm_core::llm::{LlmClient, RemoteChatClient};
use rmm_core::mock::{MockDecider, MockExtractor, MockGenerator, MockJudge};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid value for {key}: {value}")]
    Env { key: String, value: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockKind {
    System,
    /// One-second ticks from a fixed epoch, for reproducible runs.
    Logical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmSection {
    pub backend: Backend,
    pub endpoint: String,
    pub model: String,
    /// Judge used by `eval`; defaults to the mock judge even with a remote backend.
    pub judge_backend: Backend,
}

impl Default for LlmSection {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            endpoint: "http://127.0.0.1:8000/v1/complete".into(),
            model: "default".into(),
            judge_backend: Backend::Mock,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedderSection {
    pub backend: Backend,
    pub dimension: usize,
    pub normalization: Normalization,
    pub endpoint: String,
    pub model: String,
}

impl Default for EmbedderSection {
    fn default() -> Self {
        Self {
            backend: Backend::Mock,
            dimension: 256,
            normalization: Normalization::UnitL2,
            endpoint: "http://127.0.0.1:8000/v1/embed".into(),
            model: "default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub bind: String,
    pub data_dir: PathBuf,
    pub request_deadline_ms: u64,
    pub log_level: String,
    pub clock: ClockKind,
    pub agent: AgentConfig,
    pub llm: LlmSection,
    pub embedder: EmbedderSection,
    pub floors: MetricFloors,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            data_dir: PathBuf::from("rmm-data"),
            request_deadline_ms: 30_000,
            log_level: "warn".into(),
            clock: ClockKind::System,
            agent: AgentConfig::default(),
            llm: LlmSection::default(),
            embedder: EmbedderSection::default(),
            floors: MetricFloors::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Env { key: key.into(), value: value.into() })
}

fn backend(key: &str, value: &str) -> Result<Backend, ConfigError> {
    match value {
        "mock" => Ok(Backend::Mock),
        "remote" => Ok(Backend::Remote),
        _ => Err(ConfigError::Env { key: key.into(), value: value.into() }),
    }
}

impl RuntimeConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    /// Reads `path` if given, then applies overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|source| ConfigError::Read { path: p.to_owned(), source })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(std::env::vars())?;
        Ok(cfg)
    }

    /// Applies `RMM_*` variables; unknown ones are ignored.
    pub fn apply_env(&mut self, vars: impl IntoIterator<Item = (String, String)>) -> Result<(), ConfigError> {
        for (key, value) in vars {
            let Some(name) = key.strip_prefix("RMM_") else { continue };
            let v = value.as_str();
            match name {
                "BIND" => self.bind = value.clone(),
                "DATA_DIR" => self.data_dir = PathBuf::from(v),
                "REQUEST_DEADLINE_MS" => self.request_deadline_ms = parse(&key, v)?,
                "LOG_LEVEL" => self.log_level = value.clone(),
                "CLOCK" => {
                    self.clock = match v {
                        "system" => ClockKind::System,
                        "logical" => ClockKind::Logical,
                        _ => return Err(ConfigError::Env { key, value }),
                    }
                }
                "OWNER" => self.agent.owner = value.clone(),
                "MODE" => {
                    self.agent.mode = v.parse::<AgentMode>().map_err(|_| ConfigError::Env {
                        key: key.clone(),
                        value: value.clone(),
                    })?
                }
                "SEED" => self.agent.seed = parse(&key, v)?,
                "LEARNING_ENABLED" => self.agent.learning_enabled = parse(&key, v)?,
                "K_RETRIEVE" => self.agent.k_retrieve = parse(&key, v)?,
                "M_RERANK" => self.agent.m_rerank = parse(&key, v)?,
                "LLM_BACKEND" => self.llm.backend = backend(&key, v)?,
                "LLM_ENDPOINT" => self.llm.endpoint = value.clone(),
                "LLM_MODEL" => self.llm.model = value.clone(),
                "EMBEDDER_BACKEND" => self.embedder.backend = backend(&key, v)?,
                "EMBEDDER_DIMENSION" => self.embedder.dimension = parse(&key, v)?,
                "EMBEDDER_ENDPOINT" => self.embedder.endpoint = value.clone(),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn deadline(&self) -> Duration {
        Duration::from_millis(self.request_deadline_ms)
    }

    /// The agent config for `owner`, defaulting to the configured owner.
    pub fn agent_for(&self, owner: Option<&str>) -> AgentConfig {
        let mut a = self.agent.clone();
        if let Some(o) = owner {
            a.owner = o.to_owned();
        }
        a
    }

    pub fn owner_paths(&self, owner: &str) -> StorePaths {
        StorePaths::new(self.data_dir.join("owners").join(owner))
    }

    pub fn new_clock(&self) -> Arc<dyn Clock> {
        match self.clock {
            ClockKind::System => Arc::new(SystemClock),
            ClockKind::Logical => Arc::new(LogicalClock::new()),
        }
    }

    pub fn embedder(&self) -> Result<Arc<dyn Embedder>, ConfigError> {
        let e = &self.embedder;
        Ok(match e.backend {
            Backend::Mock => Arc::new(HashingEmbedder::new(e.dimension, e.normalization)),
            Backend::Remote => {
                let cfg = EmbedderConfig::remote(&e.model, e.endpoint.clone(), e.dimension, e.normalization);
                Arc::new(RemoteEmbedder::new(cfg, self.deadline()).map_err(|x| ConfigError::Invalid(x.to_string()))?)
            }
        })
    }

    fn remote_llm(&self) -> Result<Arc<dyn LlmClient>, ConfigError> {
        let c = RemoteChatClient::new(self.llm.model.clone(), self.llm.endpoint.clone(), self.deadline())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(Arc::new(c))
    }

    pub fn clients(&self) -> Result<Clients, ConfigError> {
        let embedder = self.embedder()?;
        Ok(match self.llm.backend {
            Backend::Mock => Clients {
                generator: Arc::new(MockGenerator::new()),
                extractor: Arc::new(MockExtractor::default()),
                decider: Arc::new(MockDecider::default()),
                embedder,
            },
            Backend::Remote => {
                let llm = self.remote_llm()?;
                Clients { generator: llm.clone(), extractor: llm.clone(), decider: llm, embedder }
            }
        })
    }

    pub fn judge(&self) -> Result<Arc<dyn LlmClient>, ConfigError> {
        match self.llm.judge_backend {
            Backend::Mock => Ok(Arc::new(MockJudge::new())),
            Backend::Remote => self.remote_llm(),
        }
    }

    /// Creates the data directory and checks that it accepts writes.
    pub fn ensure_data_dir(&self) -> Result<(), ConfigError> {
        let probe = self.data_dir.join(".write-probe");
        std::fs::create_dir_all(&self.data_dir)
            .and_then(|_| std::fs::write(&probe, b"ok"))
            .and_then(|_| std::fs::remove_file(&probe))
            .map_err(|e| ConfigError::Invalid(format!("data dir {} is not writable: {e}", self.data_dir.display())))
    }
}

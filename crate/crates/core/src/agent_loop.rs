//! The per-owner conversation engine.
//!
//! Each user turn runs retrieve, rerank, generate with citations, reward, and
//! update, then appends the exchange to the open session. Closing a session
//! files it in the transcript store and reflects it into the memory bank.

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::attribution::{
    build_generation_prompt, generate, rewards_from_citations, ParseStatus, PresentedMemory,
};
use crate::canonical::{sha256_hex, to_canonical_string};
use crate::clock::Clock;
use crate::embedding::{Embedder, EmbeddingError};
use crate::eval::{judge_accuracy, EvalQuestion, EvalRunRecord, QuestionRecord};
use crate::llm::LlmClient;
use crate::memory_bank::{BankError, IngestionMode, MemoryBank, RetrievalResult};
use crate::prompts::template_hashes;
use crate::prospective::{ProspectiveError, ReflectedLedger, ReflectionReport, Reflector, Speaker};
use crate::reranker::{
    Credit, RerankerError, Reranker, RerankerParams, RewardVector, SelectionMode, SelectionTrace,
    UpdateStats,
};
use crate::transcript::{SegmentRef, Session, TranscriptError, TranscriptStore, Turn};

/// Appended as the agent reply when generation fails.
pub const APOLOGY: &str = "Sorry, I can't answer right now. Please try again in a moment.";

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no active session")]
    NoActiveSession,
    #[error("session {0} is already active")]
    SessionAlreadyActive(String),
    #[error("session {0} is already closed")]
    AlreadyClosed(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("query is empty")]
    EmptyQuery,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("script order violation: {0}")]
    ScriptOrderViolation(String),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Reranker(#[from] RerankerError),
    #[error(transparent)]
    Prospective(#[from] ProspectiveError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentMode {
    /// Topic memories with the learned reranker.
    Rmm,
    RagTurn,
    RagSession,
    RagMix,
    /// No memory bank; prior turns are stuffed into the context, truncated.
    LongContext,
    /// No history at all beyond the open session.
    NoHistory,
}

impl AgentMode {
    pub fn name(self) -> &'static str {
        match self {
            AgentMode::Rmm => "rmm",
            AgentMode::RagTurn => "rag_turn",
            AgentMode::RagSession => "rag_session",
            AgentMode::RagMix => "rag_mix",
            AgentMode::LongContext => "long_context",
            AgentMode::NoHistory => "no_history",
        }
    }

    pub fn ingestion_mode(self) -> IngestionMode {
        match self {
            AgentMode::RagTurn => IngestionMode::Turn,
            AgentMode::RagSession => IngestionMode::Session,
            AgentMode::RagMix => IngestionMode::Mix,
            _ => IngestionMode::Topic,
        }
    }

    fn is_rag(self) -> bool {
        matches!(self, AgentMode::RagTurn | AgentMode::RagSession | AgentMode::RagMix)
    }
}

impl std::str::FromStr for AgentMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "rmm" => AgentMode::Rmm,
            "rag_turn" => AgentMode::RagTurn,
            "rag_session" => AgentMode::RagSession,
            "rag_mix" => AgentMode::RagMix,
            "long_context" => AgentMode::LongContext,
            "no_history" => AgentMode::NoHistory,
            other => return Err(format!("unknown mode {other}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub owner: String,
    pub mode: AgentMode,
    pub k_retrieve: usize,
    pub m_rerank: usize,
    pub k_update: usize,
    /// Entries injected by the retrieval-only modes.
    pub baseline_top_k: usize,
    pub learning_enabled: bool,
    pub reward_credit: Credit,
    pub skip_update_on_malformed: bool,
    pub session_context_cap: usize,
    pub long_context_turns: usize,
    /// Also extract memories about the agent side, filed under owner `agent`.
    pub reflect_agent_side: bool,
    pub seed: u64,
    /// Params are checkpointed after this many applied updates.
    pub checkpoint_every_updates: u64,
    pub tau: f64,
    pub eta: f64,
    pub baseline: f64,
    pub batch_size: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            owner: "user".into(),
            mode: AgentMode::Rmm,
            k_retrieve: 20,
            m_rerank: 5,
            k_update: 5,
            baseline_top_k: 5,
            learning_enabled: true,
            reward_credit: Credit::PerPosition,
            skip_update_on_malformed: false,
            session_context_cap: 20,
            long_context_turns: 100,
            reflect_agent_side: false,
            seed: 0,
            checkpoint_every_updates: 50,
            tau: 0.5,
            eta: 1e-3,
            baseline: 0.5,
            batch_size: 4,
        }
    }
}

impl AgentConfig {
    /// Checks ranges and turns learning off for modes without a reranker.
    pub fn normalized(mut self) -> Result<Self, AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.into()));
        if self.owner.trim().is_empty() || self.owner == "agent" {
            return bad("owner must be non-empty and not `agent`");
        }
        if self.k_retrieve == 0 || self.m_rerank == 0 || self.baseline_top_k == 0 {
            return bad("k_retrieve, m_rerank and baseline_top_k must be positive");
        }
        if self.m_rerank > self.k_retrieve {
            return bad("m_rerank must not exceed k_retrieve");
        }
        if self.mode != AgentMode::Rmm {
            self.learning_enabled = false;
        }
        Ok(self)
    }

    pub fn reranker_params(&self, dimension: usize) -> RerankerParams {
        let mut p = RerankerParams::zero_init(dimension, self.seed);
        p.tau = self.tau;
        p.eta = self.eta;
        p.baseline = self.baseline;
        p.credit = self.reward_credit;
        p.batch_size = self.batch_size;
        p
    }
}

/// The model-facing dependencies of an engine.
#[derive(Clone)]
pub struct Clients {
    pub generator: Arc<dyn LlmClient>,
    pub extractor: Arc<dyn LlmClient>,
    pub decider: Arc<dyn LlmClient>,
    pub embedder: Arc<dyn Embedder>,
}

impl Clients {
    /// All four mocks over the given embedder.
    pub fn mock(embedder: Arc<dyn Embedder>) -> Self {
        Self {
            generator: Arc::new(crate::mock::MockGenerator::new()),
            extractor: Arc::new(crate::mock::MockExtractor::default()),
            decider: Arc::new(crate::mock::MockDecider::default()),
            embedder,
        }
    }
}

/// File locations of one owner's state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StorePaths {
    pub dir: PathBuf,
}

impl StorePaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn bank(&self) -> PathBuf {
        self.dir.join("bank.jsonl")
    }

    pub fn transcripts(&self) -> PathBuf {
        self.dir.join("transcripts.jsonl")
    }

    pub fn reflected(&self) -> PathBuf {
        self.dir.join("reflected.jsonl")
    }

    pub fn params(&self) -> PathBuf {
        self.dir.join("params.json")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedItem {
    pub entry_id: String,
    pub score: f64,
    pub rank: usize,
}

impl From<RetrievalResult> for RetrievedItem {
    fn from(r: RetrievalResult) -> Self {
        Self { entry_id: r.entry_id, score: r.score, rank: r.rank }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TurnTiming {
    pub retrieve_us: u64,
    pub rerank_us: u64,
    pub generate_us: u64,
    pub update_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnResult {
    pub session_id: String,
    pub turn_index: usize,
    pub response: String,
    pub citations: Vec<usize>,
    pub parse_status: Option<ParseStatus>,
    pub retrieved: Vec<RetrievedItem>,
    /// Entry ids shown to the generator, in prompt order.
    pub presented: Vec<String>,
    pub trace: Option<SelectionTrace>,
    pub rewards: Option<RewardVector>,
    pub update_stats: Option<UpdateStats>,
    pub llm_error: Option<String>,
    pub timing: TurnTiming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub owner: String,
    pub mode: AgentMode,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineMetrics {
    pub owner: String,
    pub mode: AgentMode,
    pub seed: u64,
    pub turns: u64,
    pub reinforce_calls: u64,
    pub updates_applied: u64,
    pub skipped_updates: u64,
    pub llm_failures: u64,
    pub malformed_responses: u64,
    /// Mean over recent turns of the fraction of presented memories cited.
    pub mean_reward_window: Option<f64>,
    pub reward_window_len: usize,
    pub bank_size: usize,
    pub sessions: usize,
    pub active_session: Option<String>,
    pub last_update: Option<UpdateStats>,
}

const REWARD_WINDOW: usize = 100;

#[derive(Debug, Default)]
struct Counters {
    turns: u64,
    reinforce_calls: u64,
    updates_applied: u64,
    skipped_updates: u64,
    llm_failures: u64,
    malformed: u64,
    window: VecDeque<f64>,
    last_update: Option<UpdateStats>,
    applied_since_checkpoint: u64,
}

/// Answer to an evaluation question: no learning and nothing appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Answer {
    pub response: String,
    pub retrieved: Vec<String>,
    pub retrieved_segments: Vec<Vec<SegmentRef>>,
}

pub struct Engine {
    config: AgentConfig,
    clients: Clients,
    clock: Arc<dyn Clock>,
    paths: Option<StorePaths>,
    bank: MemoryBank,
    transcripts: TranscriptStore,
    ledger: ReflectedLedger,
    reranker: Reranker,
    active: Option<Session>,
    counters: Counters,
}

struct Selection {
    retrieved: Vec<RetrievedItem>,
    presented: Vec<String>,
    trace: Option<SelectionTrace>,
    rerank_us: u64,
    retrieve_us: u64,
}

fn micros(since: Instant) -> u64 {
    since.elapsed().as_micros().try_into().unwrap_or(u64::MAX)
}

impl Engine {
    /// Opens an engine, loading any state under `paths`.
    pub fn open(
        config: AgentConfig,
        clients: Clients,
        clock: Arc<dyn Clock>,
        paths: Option<StorePaths>,
    ) -> Result<Self, AgentError> {
        let config = config.normalized()?;
        let embed_cfg = clients.embedder.config().clone();
        let fresh_bank =
            || MemoryBank::new(config.owner.clone(), config.owner.clone(), &embed_cfg, config.mode.ingestion_mode());
        let (bank, transcripts, ledger, reranker) = match &paths {
            None => (
                fresh_bank(),
                TranscriptStore::new(),
                ReflectedLedger::new(),
                Reranker::new(config.reranker_params(embed_cfg.dimension))?,
            ),
            Some(p) => {
                let bank = if p.bank().exists() {
                    let b = MemoryBank::load(&p.bank(), Some(&embed_cfg))?;
                    if b.ingestion_mode() != config.mode.ingestion_mode() {
                        return Err(AgentError::Bank(BankError::ModeMismatch {
                            bank: b.ingestion_mode(),
                            requested: config.mode.ingestion_mode(),
                        }));
                    }
                    b
                } else {
                    fresh_bank()
                };
                let reranker = if p.params().exists() {
                    Reranker::load(&p.params(), Some(embed_cfg.dimension))?
                } else {
                    Reranker::new(config.reranker_params(embed_cfg.dimension))?
                };
                (bank, TranscriptStore::load(&p.transcripts())?, ReflectedLedger::load(&p.reflected())?, reranker)
            }
        };
        Ok(Self {
            config,
            clients,
            clock,
            paths,
            bank,
            transcripts,
            ledger,
            reranker,
            active: None,
            counters: Counters::default(),
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn transcripts(&self) -> &TranscriptStore {
        &self.transcripts
    }

    pub fn reranker(&self) -> &Reranker {
        &self.reranker
    }

    pub fn reranker_mut(&mut self) -> &mut Reranker {
        &mut self.reranker
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.clients.embedder.as_ref()
    }

    pub fn active_session(&self) -> Option<&Session> {
        self.active.as_ref()
    }

    /// Hash of the config, prompt templates, and client identities.
    pub fn config_hash(&self) -> String {
        let clients: BTreeMap<&str, &str> = [
            ("generator", self.clients.generator.client_id()),
            ("extractor", self.clients.extractor.client_id()),
            ("decider", self.clients.decider.client_id()),
            ("embedder", self.clients.embedder.embedder_id()),
        ]
        .into_iter()
        .collect();
        let v = serde_json::json!({
            "config": self.config,
            "prompts": template_hashes(),
            "clients": clients,
        });
        sha256_hex(to_canonical_string(&v).expect("config serializes").as_bytes())
    }

    fn next_session_id(&self) -> String {
        let mut n = self.transcripts.len();
        loop {
            let id = format!("{}-s{n:04}", self.config.owner);
            if !self.transcripts.contains(&id) {
                return id;
            }
            n += 1;
        }
    }

    pub fn start_session(&mut self) -> Result<SessionInfo, AgentError> {
        let id = self.next_session_id();
        self.start_session_with_id(&id)
    }

    pub fn start_session_with_id(&mut self, session_id: &str) -> Result<SessionInfo, AgentError> {
        if let Some(s) = &self.active {
            return Err(AgentError::SessionAlreadyActive(s.session_id.clone()));
        }
        if self.transcripts.contains(session_id) {
            return Err(AgentError::AlreadyClosed(session_id.to_owned()));
        }
        self.active = Some(Session::new(session_id));
        Ok(SessionInfo {
            session_id: session_id.to_owned(),
            owner: self.config.owner.clone(),
            mode: self.config.mode,
            seed: self.config.seed,
        })
    }

    fn check_active(&self, session_id: &str) -> Result<(), AgentError> {
        match &self.active {
            Some(s) if s.session_id == session_id => Ok(()),
            _ if self.transcripts.contains(session_id) => {
                Err(AgentError::AlreadyClosed(session_id.to_owned()))
            }
            Some(_) => Err(AgentError::UnknownSession(session_id.to_owned())),
            None => Err(AgentError::NoActiveSession),
        }
    }

    pub fn run_turn(&mut self, session_id: &str, query: &str) -> Result<TurnResult, AgentError> {
        self.turn(session_id, query, None)
    }

    /// Runs the full pipeline but records `agent_reply` as the agent's turn.
    pub fn run_turn_with_reply(
        &mut self,
        session_id: &str,
        query: &str,
        agent_reply: &str,
        timestamp: Option<String>,
    ) -> Result<TurnResult, AgentError> {
        self.turn(session_id, query, Some((agent_reply, timestamp)))
    }

    fn session_context(&self) -> Vec<Turn> {
        let current = self.active.as_ref().map(|s| s.turns.as_slice()).unwrap_or(&[]);
        let mut ctx: Vec<Turn> = Vec::new();
        if self.config.mode == AgentMode::LongContext {
            let history: Vec<&Turn> =
                self.transcripts.sessions().iter().flat_map(|s| s.turns.iter()).collect();
            let keep = self.config.long_context_turns;
            ctx.extend(history[history.len().saturating_sub(keep)..].iter().map(|t| (*t).clone()));
        }
        let cap = self.config.session_context_cap;
        ctx.extend(current[current.len().saturating_sub(cap)..].iter().cloned());
        ctx
    }

    fn select(&mut self, query: &str, mode: SelectionMode) -> Result<Selection, AgentError> {
        let empty = Selection {
            retrieved: Vec::new(),
            presented: Vec::new(),
            trace: None,
            rerank_us: 0,
            retrieve_us: 0,
        };
        let mode_cfg = self.config.mode;
        if matches!(mode_cfg, AgentMode::LongContext | AgentMode::NoHistory) || self.bank.is_empty() {
            return Ok(empty);
        }
        let t0 = Instant::now();
        let q = self.clients.embedder.embed(query)?;
        let k = if mode_cfg.is_rag() { self.config.baseline_top_k } else { self.config.k_retrieve };
        let hits = self.bank.search_top_k(&q, k)?;
        let retrieve_us = micros(t0);
        let retrieved: Vec<RetrievedItem> = hits.into_iter().map(RetrievedItem::from).collect();
        if mode_cfg.is_rag() {
            let presented = retrieved.iter().map(|r| r.entry_id.clone()).collect();
            return Ok(Selection { retrieved, presented, trace: None, rerank_us: 0, retrieve_us });
        }
        let t1 = Instant::now();
        let candidates: Vec<(String, &crate::embedding::EmbeddingVector)> = retrieved
            .iter()
            .filter_map(|r| self.bank.get(&r.entry_id).map(|e| (r.entry_id.clone(), &e.embedding)))
            .collect();
        let m = self.config.m_rerank.min(candidates.len());
        let trace = self.reranker.rerank(&q, &candidates, m, mode)?;
        let presented = trace.selected_ids();
        Ok(Selection { retrieved, presented, trace: Some(trace), rerank_us: micros(t1), retrieve_us })
    }

    fn prompt_for(&self, query: &str, context: &[Turn], presented: &[String]) -> Result<String, AgentError> {
        let mut memories = Vec::with_capacity(presented.len());
        for id in presented {
            let entry = self.bank.get(id).ok_or_else(|| BankError::UnknownEntryId(id.clone()))?;
            let mut turns = Vec::new();
            for seg in &entry.segments {
                turns.extend(self.transcripts.resolve(seg)?);
            }
            memories.push(PresentedMemory { entry, turns });
        }
        Ok(build_generation_prompt(query, context, &memories))
    }

    fn turn(
        &mut self,
        session_id: &str,
        query: &str,
        forced: Option<(&str, Option<String>)>,
    ) -> Result<TurnResult, AgentError> {
        self.check_active(session_id)?;
        if query.trim().is_empty() {
            return Err(AgentError::EmptyQuery);
        }
        let learning = self.config.learning_enabled && self.config.mode == AgentMode::Rmm;
        let sel_mode = if learning { SelectionMode::Train } else { SelectionMode::Infer };
        let snapshot = self.reranker.clone();
        let sel = self.select(query, sel_mode)?;
        let context = self.session_context();
        let prompt = self.prompt_for(query, &context, &sel.presented)?;
        let m = sel.presented.len();

        let t_gen = Instant::now();
        let generated = generate(self.clients.generator.as_ref(), &prompt, m);
        let generate_us = micros(t_gen);
        let mut result = TurnResult {
            session_id: session_id.to_owned(),
            turn_index: self.active.as_ref().map_or(0, Session::len),
            response: String::new(),
            citations: Vec::new(),
            parse_status: None,
            retrieved: sel.retrieved,
            presented: sel.presented,
            trace: None,
            rewards: None,
            update_stats: None,
            llm_error: None,
            timing: TurnTiming { retrieve_us: sel.retrieve_us, rerank_us: sel.rerank_us, generate_us, update_us: 0 },
        };

        match generated {
            Err(e) => {
                warn!(error = %e, "generation failed, answering with fallback");
                self.counters.llm_failures += 1;
                result.response = APOLOGY.to_owned();
                result.llm_error = Some(e.to_string());
                result.trace = sel.trace;
            }
            Ok(resp) => {
                if resp.parse_status == ParseStatus::MalformedFailed {
                    self.counters.malformed += 1;
                }
                result.response = resp.text.clone();
                result.citations = resp.citations.clone();
                result.parse_status = Some(resp.parse_status);
                if let Some(trace) = sel.trace {
                    let rewards = rewards_from_citations(&resp, m);
                    if m > 0 {
                        let useful = rewards.positives() as f64 / m as f64;
                        self.counters.window.push_back(useful);
                        if self.counters.window.len() > REWARD_WINDOW {
                            self.counters.window.pop_front();
                        }
                    }
                    let skip = resp.parse_status == ParseStatus::MalformedFailed
                        && self.config.skip_update_on_malformed;
                    if learning && m > 0 && !skip {
                        let t_up = Instant::now();
                        match self.reranker.reinforce_update(&trace, &rewards) {
                            Ok(stats) => {
                                self.counters.reinforce_calls += 1;
                                if stats.applied {
                                    self.counters.updates_applied += 1;
                                    self.counters.applied_since_checkpoint += 1;
                                }
                                self.counters.last_update = Some(stats.clone());
                                result.update_stats = Some(stats);
                            }
                            Err(e) => {
                                warn!(error = %e, "reranker update rejected");
                                self.counters.skipped_updates += 1;
                            }
                        }
                        result.timing.update_us = micros(t_up);
                    } else if learning {
                        self.counters.skipped_updates += 1;
                    }
                    result.rewards = Some(rewards);
                    result.trace = Some(trace);
                }
            }
        }

        if self.counters.applied_since_checkpoint >= self.config.checkpoint_every_updates {
            if let Err(e) = self.save_params() {
                self.reranker = snapshot;
                return Err(e);
            }
            self.counters.applied_since_checkpoint = 0;
        }

        let now = self.clock.now();
        let (agent_text, timestamp) = match forced {
            Some((reply, ts)) => (reply.to_owned(), ts.or_else(|| Some(now.to_rfc3339()))),
            None => (result.response.clone(), Some(now.to_rfc3339())),
        };
        let session = self.active.as_mut().ok_or(AgentError::NoActiveSession)?;
        session.push_turn(query, agent_text, timestamp)?;
        self.counters.turns += 1;
        Ok(result)
    }

    /// Answers without learning and without touching the open session.
    pub fn answer(&mut self, question: &str) -> Result<Answer, AgentError> {
        if question.trim().is_empty() {
            return Err(AgentError::EmptyQuery);
        }
        let sel = self.select(question, SelectionMode::Infer)?;
        let context = if self.config.mode == AgentMode::LongContext {
            self.session_context()
        } else {
            Vec::new()
        };
        let prompt = self.prompt_for(question, &context, &sel.presented)?;
        let response = match generate(self.clients.generator.as_ref(), &prompt, sel.presented.len()) {
            Ok(r) => r.text,
            Err(e) => {
                warn!(error = %e, "generation failed while answering");
                APOLOGY.to_owned()
            }
        };
        let retrieved_segments = sel
            .presented
            .iter()
            .map(|id| self.bank.get(id).map(|e| e.segments.clone()).unwrap_or_default())
            .collect();
        Ok(Answer { response, retrieved: sel.presented, retrieved_segments })
    }

    /// Closes the open session, files it, and reflects it into the bank.
    pub fn end_session(&mut self, session_id: &str) -> Result<ReflectionReport, AgentError> {
        self.check_active(session_id)?;
        let mut session = self.active.take().ok_or(AgentError::NoActiveSession)?;
        session.close();
        self.file_session(session)
    }

    fn file_session(&mut self, session: Session) -> Result<ReflectionReport, AgentError> {
        let id = session.session_id.clone();
        self.transcripts.insert(session)?;
        let session = self.transcripts.get(&id).cloned().ok_or(AgentError::UnknownSession(id.clone()))?;
        let report = match self.config.mode {
            AgentMode::Rmm => {
                let mut owners = vec![(Speaker::User, self.config.owner.clone())];
                if self.config.reflect_agent_side {
                    owners.push((Speaker::Agent, "agent".to_owned()));
                }
                let reflector = Reflector {
                    extractor: self.clients.extractor.as_ref(),
                    decider: self.clients.decider.as_ref(),
                    embedder: self.clients.embedder.as_ref(),
                    k_update: self.config.k_update,
                };
                reflector.reflect(
                    &mut self.bank,
                    &self.transcripts,
                    &mut self.ledger,
                    &session,
                    &owners,
                    self.clock.as_ref(),
                )?
            }
            mode if mode.is_rag() => {
                let mut report = ReflectionReport { session_id: id.clone(), ..Default::default() };
                if self.ledger.contains(&id) {
                    report.already_reflected = true;
                } else {
                    let before = self.bank.len();
                    let added = self.bank.ingest_fixed_granularity(
                        &session,
                        mode.ingestion_mode(),
                        self.clients.embedder.as_ref(),
                        &self.transcripts,
                        self.clock.now(),
                    )?;
                    report.extracted = added;
                    report.added = added;
                    report.added_entry_ids =
                        self.bank.entries()[before..].iter().map(|e| e.entry_id.clone()).collect();
                    self.ledger.mark(&id);
                }
                report
            }
            _ => {
                self.ledger.mark(&id);
                ReflectionReport { session_id: id.clone(), ..Default::default() }
            }
        };
        info!(session = %id, added = report.added, merged = report.merged, "session closed");
        self.checkpoint()?;
        Ok(report)
    }

    /// Replays closed sessions turn by turn with their recorded agent replies,
    /// closing and reflecting each one.
    pub fn replay(&mut self, sessions: &[Session]) -> Result<Vec<ReflectionReport>, AgentError> {
        let mut reports = Vec::with_capacity(sessions.len());
        for s in sessions {
            s.validate()?;
            reports.push(self.replay_one(s)?);
        }
        Ok(reports)
    }

    fn replay_one(&mut self, s: &Session) -> Result<ReflectionReport, AgentError> {
        self.start_session_with_id(&s.session_id)?;
        for t in &s.turns {
            self.run_turn_with_reply(&s.session_id, &t.user_utterance, &t.agent_utterance, t.timestamp.clone())?;
        }
        self.end_session(&s.session_id)
    }

    fn save_params(&self) -> Result<(), AgentError> {
        if let Some(p) = &self.paths {
            self.reranker.save(&p.params())?;
        }
        Ok(())
    }

    /// Writes bank, transcripts, ledger, and params.
    pub fn checkpoint(&self) -> Result<(), AgentError> {
        if let Some(p) = &self.paths {
            self.transcripts.save(&p.transcripts())?;
            self.bank.save(&p.bank())?;
            self.ledger.save(&p.reflected())?;
            self.reranker.save(&p.params())?;
        }
        Ok(())
    }

    /// Resets the reranker to zero adapters and persists it.
    pub fn reset_params(&mut self) -> Result<(), AgentError> {
        self.reranker = Reranker::new(self.config.reranker_params(self.clients.embedder.dimension()))?;
        self.save_params()
    }

    pub fn metrics(&self) -> EngineMetrics {
        let w = &self.counters.window;
        EngineMetrics {
            owner: self.config.owner.clone(),
            mode: self.config.mode,
            seed: self.config.seed,
            turns: self.counters.turns,
            reinforce_calls: self.counters.reinforce_calls,
            updates_applied: self.counters.updates_applied,
            skipped_updates: self.counters.skipped_updates,
            llm_failures: self.counters.llm_failures,
            malformed_responses: self.counters.malformed,
            mean_reward_window: (!w.is_empty()).then(|| w.iter().sum::<f64>() / w.len() as f64),
            reward_window_len: w.len(),
            bank_size: self.bank.len(),
            sessions: self.transcripts.len(),
            active_session: self.active.as_ref().map(|s| s.session_id.clone()),
            last_update: self.counters.last_update.clone(),
        }
    }
}

/// Sessions to replay and questions to ask afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub sessions: Vec<Session>,
    pub questions: Vec<EvalQuestion>,
}

impl Script {
    pub fn load(path: &Path) -> Result<Self, AgentError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| {
            AgentError::InvalidConfig(format!("script {}: {e}", path.display()))
        })
    }

    /// Position in the session list after which each question is asked.
    fn schedule(&self) -> Result<Vec<usize>, AgentError> {
        let pos: BTreeMap<&str, usize> =
            self.sessions.iter().enumerate().map(|(i, s)| (s.session_id.as_str(), i)).collect();
        if pos.len() != self.sessions.len() {
            return Err(AgentError::ScriptOrderViolation("duplicate session id".into()));
        }
        let last = self.sessions.len().saturating_sub(1);
        self.questions
            .iter()
            .map(|q| {
                let at = match &q.asked_after_session {
                    Some(s) => *pos.get(s.as_str()).ok_or_else(|| {
                        AgentError::ScriptOrderViolation(format!("{}: unknown session {s}", q.qid))
                    })?,
                    None => last,
                };
                for g in &q.gold_evidence {
                    let e = pos.get(g.session_id.as_str()).ok_or_else(|| {
                        AgentError::ScriptOrderViolation(format!(
                            "{}: evidence session {} is not in the script",
                            q.qid, g.session_id
                        ))
                    })?;
                    if *e > at {
                        return Err(AgentError::ScriptOrderViolation(format!(
                            "{} is asked before its evidence session {}",
                            q.qid, g.session_id
                        )));
                    }
                }
                Ok(at)
            })
            .collect()
    }
}

/// Replays the script's sessions and answers each question once its
/// evidence has been seen. A judge, when given, fills in verdicts.
pub fn run_scripted(
    engine: &mut Engine,
    script: &Script,
    judge: Option<&dyn LlmClient>,
) -> Result<EvalRunRecord, AgentError> {
    let schedule = script.schedule()?;
    for s in &script.sessions {
        s.validate()?;
    }
    let mut records: Vec<Option<QuestionRecord>> = vec![None; script.questions.len()];
    for (i, s) in script.sessions.iter().enumerate() {
        engine.replay_one(s)?;
        for (qi, q) in script.questions.iter().enumerate() {
            if schedule[qi] != i {
                continue;
            }
            let a = engine.answer(&q.question)?;
            let judge_verdict = match judge {
                Some(j) => Some(
                    judge_accuracy(&q.question, &q.gold_answer, &a.response, j)
                        .map(|o| o.verdict)
                        .unwrap_or(crate::eval::Verdict::No),
                ),
                None => None,
            };
            records[qi] = Some(QuestionRecord {
                qid: q.qid.clone(),
                question: q.question.clone(),
                answer: a.response,
                gold_answer: q.gold_answer.clone(),
                retrieved: a.retrieved,
                retrieved_segments: a.retrieved_segments,
                gold_evidence: q.gold_evidence.clone(),
                judge_verdict,
            });
        }
    }
    Ok(EvalRunRecord {
        mode: engine.config().mode.name().to_owned(),
        seed: engine.config().seed,
        config_hash: engine.config_hash(),
        questions: records.into_iter().flatten().collect(),
    })
}

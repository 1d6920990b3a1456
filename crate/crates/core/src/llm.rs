//! The text-completion interface the pipeline talks to, and its remote backend.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LlmError {
    #[error("llm unavailable: {0}")]
    Unavailable(String),
    #[error("llm returned an invalid response: {0}")]
    InvalidResponse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LlmClientKind {
    RemoteChat,
    MockGenerator,
    MockExtractor,
    MockDecider,
    MockJudge,
    Scripted,
}

pub trait LlmClient: Send + Sync {
    fn client_id(&self) -> &str;
    fn kind(&self) -> LlmClientKind;
    fn complete(&self, prompt: &str) -> Result<String, LlmError>;
    /// Number of `complete` calls made so far.
    fn call_count(&self) -> usize;
}

/// Chat completion over HTTP.
pub struct RemoteChatClient {
    client_id: String,
    endpoint: String,
    model: String,
    http: reqwest::blocking::Client,
    calls: AtomicUsize,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    temperature: f64,
}

#[derive(Deserialize)]
struct ChatResponse {
    text: String,
}

impl RemoteChatClient {
    pub fn new(
        model: impl Into<String>,
        endpoint: impl Into<String>,
        deadline: Duration,
    ) -> Result<Self, LlmError> {
        let model = model.into();
        let http = reqwest::blocking::Client::builder()
            .timeout(deadline)
            .build()
            .map_err(|e| LlmError::Unavailable(e.to_string()))?;
        Ok(Self {
            client_id: format!("remote-{model}"),
            endpoint: endpoint.into(),
            model,
            http,
            calls: AtomicUsize::new(0),
        })
    }
}

impl LlmClient for RemoteChatClient {
    fn client_id(&self) -> &str {
        &self.client_id
    }

    fn kind(&self) -> LlmClientKind {
        LlmClientKind::RemoteChat
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let body = ChatRequest { model: &self.model, prompt, temperature: 0.0 };
        let resp = self
            .http
            .post(&self.endpoint)
            .json(&body)
            .send()
            .map_err(|e| LlmError::Unavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(LlmError::Unavailable(format!("status {}", resp.status())));
        }
        let parsed: ChatResponse =
            resp.json().map_err(|e| LlmError::InvalidResponse(e.to_string()))?;
        Ok(parsed.text)
    }

    fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

/// Replays a fixed queue of answers, then fails. Records every prompt.
pub struct ScriptedClient {
    client_id: String,
    queue: Mutex<VecDeque<Result<String, LlmError>>>,
    prompts: Mutex<Vec<String>>,
}

impl ScriptedClient {
    pub fn new(client_id: impl Into<String>, answers: Vec<Result<String, LlmError>>) -> Self {
        Self {
            client_id: client_id.into(),
            queue: Mutex::new(answers.into()),
            prompts: Mutex::new(Vec::new()),
        }
    }

    pub fn ok<S: Into<String>>(client_id: &str, answers: impl IntoIterator<Item = S>) -> Self {
        Self::new(client_id, answers.into_iter().map(|a| Ok(a.into())).collect())
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("prompt log poisoned").clone()
    }
}

impl LlmClient for ScriptedClient {
    fn client_id(&self) -> &str {
        &self.client_id
    }

    fn kind(&self) -> LlmClientKind {
        LlmClientKind::Scripted
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.prompts.lock().expect("prompt log poisoned").push(prompt.to_owned());
        self.queue
            .lock()
            .expect("answer queue poisoned")
            .pop_front()
            .unwrap_or_else(|| Err(LlmError::Unavailable("script exhausted".into())))
    }

    fn call_count(&self) -> usize {
        self.prompts.lock().expect("prompt log poisoned").len()
    }
}

//! Raw conversation records: turns, sessions, and the immutable transcript store.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{atomic_write, to_canonical_string};

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("session {0} is closed")]
    SessionClosed(String),
    #[error("session {0} is not closed")]
    SessionNotClosed(String),
    #[error("duplicate session id {0}")]
    DuplicateSession(String),
    #[error("unknown session {0}")]
    UnknownSession(String),
    #[error("turn {turn} not found in session {session_id}")]
    UnknownTurn { session_id: String, turn: usize },
    #[error("user utterance is empty")]
    EmptyUtterance,
    #[error("invalid session {session_id}: {reason}")]
    InvalidSession { session_id: String, reason: String },
    #[error("corrupt transcript file at line {line}: {message}")]
    CorruptFile { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub user_utterance: String,
    pub agent_utterance: String,
    #[serde(default)]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub session_id: String,
    pub turns: Vec<Turn>,
    pub closed: bool,
}

impl Session {
    pub fn new(session_id: impl Into<String>) -> Self {
        Self { session_id: session_id.into(), turns: Vec::new(), closed: false }
    }

    /// Appends a turn and returns its index.
    pub fn push_turn(
        &mut self,
        user: impl Into<String>,
        agent: impl Into<String>,
        timestamp: Option<String>,
    ) -> Result<usize, TranscriptError> {
        if self.closed {
            return Err(TranscriptError::SessionClosed(self.session_id.clone()));
        }
        let user = user.into();
        if user.trim().is_empty() {
            return Err(TranscriptError::EmptyUtterance);
        }
        let index = self.turns.len();
        self.turns.push(Turn { index, user_utterance: user, agent_utterance: agent.into(), timestamp });
        Ok(index)
    }

    pub fn close(&mut self) {
        self.closed = true;
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn validate(&self) -> Result<(), TranscriptError> {
        let invalid = |reason: String| TranscriptError::InvalidSession {
            session_id: self.session_id.clone(),
            reason,
        };
        if self.session_id.trim().is_empty() {
            return Err(invalid("empty session id".into()));
        }
        for (i, t) in self.turns.iter().enumerate() {
            if t.index != i {
                return Err(invalid(format!("turn at position {i} has index {}", t.index)));
            }
            if t.user_utterance.trim().is_empty() {
                return Err(invalid(format!("turn {i} has an empty user utterance")));
            }
        }
        Ok(())
    }
}

/// A reference to one or more turns of a stored session.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentRef {
    pub session_id: String,
    pub turn_indices: Vec<usize>,
}

impl SegmentRef {
    /// Sorts and dedups the indices. Returns `None` when no index is given.
    pub fn new(session_id: impl Into<String>, mut turn_indices: Vec<usize>) -> Option<Self> {
        turn_indices.sort_unstable();
        turn_indices.dedup();
        if turn_indices.is_empty() {
            return None;
        }
        Some(Self { session_id: session_id.into(), turn_indices })
    }

    pub fn contains(&self, session_id: &str, turn: usize) -> bool {
        self.session_id == session_id && self.turn_indices.binary_search(&turn).is_ok()
    }
}

/// Append-only store of closed sessions, in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TranscriptStore {
    sessions: Vec<Session>,
    index: HashMap<String, usize>,
}

impl TranscriptStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, session: Session) -> Result<(), TranscriptError> {
        if !session.closed {
            return Err(TranscriptError::SessionNotClosed(session.session_id));
        }
        session.validate()?;
        if self.index.contains_key(&session.session_id) {
            return Err(TranscriptError::DuplicateSession(session.session_id));
        }
        self.index.insert(session.session_id.clone(), self.sessions.len());
        self.sessions.push(session);
        Ok(())
    }

    pub fn get(&self, session_id: &str) -> Option<&Session> {
        self.index.get(session_id).map(|&i| &self.sessions[i])
    }

    pub fn contains(&self, session_id: &str) -> bool {
        self.index.contains_key(session_id)
    }

    pub fn sessions(&self) -> &[Session] {
        &self.sessions
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// Turns referenced by `segment`, in index order.
    pub fn resolve(&self, segment: &SegmentRef) -> Result<Vec<&Turn>, TranscriptError> {
        let session = self
            .get(&segment.session_id)
            .ok_or_else(|| TranscriptError::UnknownSession(segment.session_id.clone()))?;
        segment
            .turn_indices
            .iter()
            .map(|&t| {
                session.turns.get(t).ok_or_else(|| TranscriptError::UnknownTurn {
                    session_id: segment.session_id.clone(),
                    turn: t,
                })
            })
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.sessions {
            out.push_str(&to_canonical_string(s).expect("session serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, TranscriptError> {
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(TranscriptError::CorruptFile {
                line: text.lines().count(),
                message: "file does not end with a newline (truncated?)".into(),
            });
        }
        let mut store = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let session: Session = serde_json::from_str(line).map_err(|e| {
                TranscriptError::CorruptFile { line: i + 1, message: e.to_string() }
            })?;
            store.insert(session).map_err(|e| TranscriptError::CorruptFile {
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<(), TranscriptError> {
        atomic_write(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }

    /// Loads a transcript file; a missing file yields an empty store.
    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        match fs::read_to_string(path) {
            Ok(text) => Self::from_jsonl(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new()),
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed(id: &str, n: usize) -> Session {
        let mut s = Session::new(id);
        for i in 0..n {
            s.push_turn(format!("user {i}"), format!("agent {i}"), None).unwrap();
        }
        s.close();
        s
    }

    #[test]
    fn closed_sessions_are_immutable() {
        let mut s = closed("s", 1);
        assert!(matches!(s.push_turn("x", "y", None), Err(TranscriptError::SessionClosed(_))));
    }

    #[test]
    fn store_rejects_open_and_duplicate() {
        let mut store = TranscriptStore::new();
        assert!(store.insert(Session::new("open")).is_err());
        store.insert(closed("a", 2)).unwrap();
        assert!(matches!(store.insert(closed("a", 1)), Err(TranscriptError::DuplicateSession(_))));
    }

    #[test]
    fn resolve_and_unknown_turn() {
        let mut store = TranscriptStore::new();
        store.insert(closed("a", 3)).unwrap();
        let seg = SegmentRef::new("a", vec![2, 0, 2]).unwrap();
        assert_eq!(seg.turn_indices, vec![0, 2]);
        let turns = store.resolve(&seg).unwrap();
        assert_eq!(turns[1].user_utterance, "user 2");
        let bad = SegmentRef::new("a", vec![5]).unwrap();
        assert!(store.resolve(&bad).is_err());
        assert!(SegmentRef::new("a", vec![]).is_none());
    }

    #[test]
    fn jsonl_round_trip_and_truncation() {
        let mut store = TranscriptStore::new();
        store.insert(closed("a", 2)).unwrap();
        store.insert(closed("b", 1)).unwrap();
        let text = store.to_jsonl();
        assert!(text.starts_with(r#"{"closed":true,"session_id":"a","turns":[{"agent_utterance""#));
        assert_eq!(TranscriptStore::from_jsonl(&text).unwrap(), store);
        let cut = &text[..text.len() - 10];
        assert!(matches!(
            TranscriptStore::from_jsonl(cut),
            Err(TranscriptError::CorruptFile { .. })
        ));
    }

    #[test]
    fn gapped_indices_rejected_on_load() {
        let line = r#"{"session_id":"a","closed":true,"turns":[{"index":1,"user_utterance":"x","agent_utterance":"y"}]}"#;
        let err = TranscriptStore::from_jsonl(&format!("{line}\n")).unwrap_err();
        assert!(matches!(err, TranscriptError::CorruptFile { line: 1, .. }));
    }
}

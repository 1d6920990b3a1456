//! The per-owner memory bank.
//!
//! Entries pair a topic summary (the search key) with references into the
//! transcript store. Search is an exact scan: every entry is scored against
//! the query by dot product and the best `k` are returned, ties going to the
//! older entry and then to the smaller entry id.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::{atomic_write, sha256_hex, to_canonical_string};
use crate::embedding::{dot, Embedder, EmbedderConfig, EmbeddingError, EmbeddingVector};
use crate::transcript::{SegmentRef, Session, TranscriptError, TranscriptStore};

#[derive(Debug, Error)]
pub enum BankError {
    #[error("dimension mismatch: bank has {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("embedder mismatch: bank uses {bank}, got {other}")]
    EmbedderMismatch { bank: String, other: String },
    #[error("duplicate entry id {0}")]
    DuplicateEntryId(String),
    #[error("unknown entry id {0}")]
    UnknownEntryId(String),
    #[error("text is empty")]
    EmptyText,
    #[error("entry {0} has no segments")]
    NoSegments(String),
    #[error("segment references missing turn: {0}")]
    OrphanSegment(TranscriptError),
    #[error("session {0} is not closed")]
    SessionNotClosed(String),
    #[error("bank ingestion mode {bank:?} does not accept {requested:?}")]
    ModeMismatch { bank: IngestionMode, requested: IngestionMode },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("corrupt bank file at line {line}: {message}")]
    CorruptFile { line: usize, message: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestionMode {
    Topic,
    Turn,
    Session,
    Mix,
}

impl IngestionMode {
    fn accepts(self, requested: IngestionMode) -> bool {
        self == requested || (self == IngestionMode::Mix && requested != IngestionMode::Topic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub entry_id: String,
    pub owner: String,
    pub topic_summary: String,
    pub segments: Vec<SegmentRef>,
    pub embedding: EmbeddingVector,
    pub created_at: DateTime<Utc>,
    pub updated_at: DateTime<Utc>,
    pub merge_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub entry_id: String,
    pub score: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct BankHeader {
    bank_id: String,
    owner: String,
    embedder_id: String,
    dimension: usize,
    ingestion_mode: IngestionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    bank_id: String,
    owner: String,
    embedder_id: String,
    dimension: usize,
    ingestion_mode: IngestionMode,
    entries: Vec<MemoryEntry>,
    by_id: HashMap<String, usize>,
}

impl MemoryBank {
    pub fn new(
        bank_id: impl Into<String>,
        owner: impl Into<String>,
        embedder: &EmbedderConfig,
        ingestion_mode: IngestionMode,
    ) -> Self {
        Self {
            bank_id: bank_id.into(),
            owner: owner.into(),
            embedder_id: embedder.embedder_id.clone(),
            dimension: embedder.dimension,
            ingestion_mode,
            entries: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn bank_id(&self) -> &str {
        &self.bank_id
    }

    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn embedder_id(&self) -> &str {
        &self.embedder_id
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn ingestion_mode(&self) -> IngestionMode {
        self.ingestion_mode
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn get(&self, entry_id: &str) -> Option<&MemoryEntry> {
        self.by_id.get(entry_id).map(|&i| &self.entries[i])
    }

    /// Ids are sequential since the bank has no deletion.
    pub fn next_entry_id(&self) -> String {
        format!("{}-m{:06}", self.bank_id, self.entries.len())
    }

    pub fn check_embedder(&self, embedder: &dyn Embedder) -> Result<(), BankError> {
        if embedder.embedder_id() != self.embedder_id {
            return Err(BankError::EmbedderMismatch {
                bank: self.embedder_id.clone(),
                other: embedder.embedder_id().to_owned(),
            });
        }
        Ok(())
    }

    /// Builds (but does not insert) an entry keyed by `summary`.
    pub fn new_entry(
        &self,
        owner: &str,
        summary: &str,
        segments: Vec<SegmentRef>,
        embedder: &dyn Embedder,
        now: DateTime<Utc>,
    ) -> Result<MemoryEntry, BankError> {
        self.check_embedder(embedder)?;
        if summary.trim().is_empty() {
            return Err(BankError::EmptyText);
        }
        let embedding = embedder.embed(summary)?;
        Ok(MemoryEntry {
            entry_id: self.next_entry_id(),
            owner: owner.to_owned(),
            topic_summary: summary.to_owned(),
            segments: dedup_segments(segments),
            embedding,
            created_at: now,
            updated_at: now,
            merge_count: 0,
        })
    }

    /// Exact Top-K by dot product. An empty bank yields an empty list.
    pub fn search_top_k(
        &self,
        query: &EmbeddingVector,
        k: usize,
    ) -> Result<Vec<RetrievalResult>, BankError> {
        if k == 0 {
            return Err(BankError::ZeroK);
        }
        if query.dim() != self.dimension {
            return Err(BankError::DimensionMismatch { expected: self.dimension, actual: query.dim() });
        }
        let mut scored: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (i, dot(query.as_slice(), e.embedding.as_slice())))
            .collect();
        let cmp = |a: &(usize, f64), b: &(usize, f64)| self.rank_order(a, b);
        let k = k.min(scored.len());
        if k == 0 {
            return Ok(Vec::new());
        }
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, cmp);
            scored.truncate(k);
        }
        scored.sort_unstable_by(cmp);
        Ok(scored
            .into_iter()
            .enumerate()
            .map(|(r, (i, score))| RetrievalResult {
                entry_id: self.entries[i].entry_id.clone(),
                score,
                rank: r + 1,
            })
            .collect())
    }

    /// Embeds `text` and searches, refusing a foreign embedder.
    pub fn search_text(
        &self,
        embedder: &dyn Embedder,
        text: &str,
        k: usize,
    ) -> Result<Vec<RetrievalResult>, BankError> {
        self.check_embedder(embedder)?;
        let q = embedder.embed(text)?;
        self.search_top_k(&q, k)
    }

    fn rank_order(&self, a: &(usize, f64), b: &(usize, f64)) -> Ordering {
        let (ea, eb) = (&self.entries[a.0], &self.entries[b.0]);
        b.1.total_cmp(&a.1)
            .then_with(|| ea.created_at.cmp(&eb.created_at))
            .then_with(|| ea.entry_id.cmp(&eb.entry_id))
    }

    pub fn add_entry(
        &mut self,
        entry: MemoryEntry,
        transcripts: &TranscriptStore,
    ) -> Result<(), BankError> {
        if self.by_id.contains_key(&entry.entry_id) {
            return Err(BankError::DuplicateEntryId(entry.entry_id));
        }
        if entry.embedding.dim() != self.dimension {
            return Err(BankError::DimensionMismatch {
                expected: self.dimension,
                actual: entry.embedding.dim(),
            });
        }
        if entry.topic_summary.trim().is_empty() {
            return Err(BankError::EmptyText);
        }
        if entry.segments.is_empty() {
            return Err(BankError::NoSegments(entry.entry_id));
        }
        check_segments(&entry.segments, transcripts)?;
        self.by_id.insert(entry.entry_id.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(())
    }

    /// Replaces the target's summary, unions in `new_segments`, and re-embeds.
    pub fn merge_entry(
        &mut self,
        target_entry_id: &str,
        merged_summary: &str,
        new_segments: Vec<SegmentRef>,
        embedder: &dyn Embedder,
        transcripts: &TranscriptStore,
        now: DateTime<Utc>,
    ) -> Result<(), BankError> {
        self.check_embedder(embedder)?;
        let &idx = self
            .by_id
            .get(target_entry_id)
            .ok_or_else(|| BankError::UnknownEntryId(target_entry_id.to_owned()))?;
        if merged_summary.trim().is_empty() {
            return Err(BankError::EmptyText);
        }
        check_segments(&new_segments, transcripts)?;
        let embedding = embedder.embed(merged_summary)?;
        let entry = &mut self.entries[idx];
        let mut segments = std::mem::take(&mut entry.segments);
        segments.extend(new_segments);
        entry.segments = dedup_segments(segments);
        entry.topic_summary = merged_summary.to_owned();
        entry.embedding = embedding;
        entry.merge_count += 1;
        entry.updated_at = now;
        Ok(())
    }

    /// Fixed-granularity ingestion: one entry per turn and/or one per session.
    pub fn ingest_fixed_granularity(
        &mut self,
        session: &Session,
        mode: IngestionMode,
        embedder: &dyn Embedder,
        transcripts: &TranscriptStore,
        now: DateTime<Utc>,
    ) -> Result<usize, BankError> {
        if !session.closed {
            return Err(BankError::SessionNotClosed(session.session_id.clone()));
        }
        if mode == IngestionMode::Topic || !self.ingestion_mode.accepts(mode) {
            return Err(BankError::ModeMismatch { bank: self.ingestion_mode, requested: mode });
        }
        let before = self.len();
        let owner = self.owner.clone();
        if matches!(mode, IngestionMode::Turn | IngestionMode::Mix) {
            for t in &session.turns {
                let text = format!("{}\n{}", t.user_utterance, t.agent_utterance);
                let seg = SegmentRef::new(&session.session_id, vec![t.index]).into_iter().collect();
                let entry = self.new_entry(&owner, &text, seg, embedder, now)?;
                self.add_entry(entry, transcripts)?;
            }
        }
        if matches!(mode, IngestionMode::Session | IngestionMode::Mix) && !session.is_empty() {
            let text = session
                .turns
                .iter()
                .map(|t| format!("{}\n{}", t.user_utterance, t.agent_utterance))
                .collect::<Vec<_>>()
                .join("\n");
            let seg = SegmentRef::new(&session.session_id, (0..session.len()).collect())
                .into_iter()
                .collect();
            let entry = self.new_entry(&owner, &text, seg, embedder, now)?;
            self.add_entry(entry, transcripts)?;
        }
        Ok(self.len() - before)
    }

    pub fn to_jsonl(&self) -> String {
        let header = BankHeader {
            bank_id: self.bank_id.clone(),
            owner: self.owner.clone(),
            embedder_id: self.embedder_id.clone(),
            dimension: self.dimension,
            ingestion_mode: self.ingestion_mode,
        };
        let mut out = to_canonical_string(&header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&to_canonical_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    /// SHA-256 of the canonical serialization.
    pub fn state_hash(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn from_jsonl(text: &str, expected: Option<&EmbedderConfig>) -> Result<Self, BankError> {
        let corrupt = |line: usize, message: String| BankError::CorruptFile { line, message };
        if !text.ends_with('\n') {
            return Err(corrupt(
                text.lines().count().max(1),
                "file does not end with a newline (truncated?)".into(),
            ));
        }
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| corrupt(1, "missing header".into()))?;
        let header: BankHeader =
            serde_json::from_str(first).map_err(|e| corrupt(1, format!("header: {e}")))?;
        if let Some(cfg) = expected {
            if cfg.embedder_id != header.embedder_id {
                return Err(BankError::EmbedderMismatch {
                    bank: header.embedder_id,
                    other: cfg.embedder_id.clone(),
                });
            }
            if cfg.dimension != header.dimension {
                return Err(BankError::DimensionMismatch {
                    expected: cfg.dimension,
                    actual: header.dimension,
                });
            }
        }
        let mut bank = Self {
            bank_id: header.bank_id,
            owner: header.owner,
            embedder_id: header.embedder_id,
            dimension: header.dimension,
            ingestion_mode: header.ingestion_mode,
            entries: Vec::new(),
            by_id: HashMap::new(),
        };
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let entry: MemoryEntry =
                serde_json::from_str(line).map_err(|e| corrupt(i + 1, e.to_string()))?;
            if entry.embedding.dim() != bank.dimension {
                return Err(corrupt(
                    i + 1,
                    format!("embedding has dimension {}", entry.embedding.dim()),
                ));
            }
            if bank.by_id.contains_key(&entry.entry_id) {
                return Err(corrupt(i + 1, format!("duplicate entry id {}", entry.entry_id)));
            }
            bank.by_id.insert(entry.entry_id.clone(), bank.entries.len());
            bank.entries.push(entry);
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<(), BankError> {
        atomic_write(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected: Option<&EmbedderConfig>) -> Result<Self, BankError> {
        let text = fs::read_to_string(path)?;
        Self::from_jsonl(&text, expected)
    }
}

fn check_segments(segments: &[SegmentRef], transcripts: &TranscriptStore) -> Result<(), BankError> {
    for s in segments {
        transcripts.resolve(s).map_err(BankError::OrphanSegment)?;
    }
    Ok(())
}

/// Order-preserving dedup of exact duplicates.
fn dedup_segments(segments: Vec<SegmentRef>) -> Vec<SegmentRef> {
    let mut out: Vec<SegmentRef> = Vec::with_capacity(segments.len());
    for s in segments {
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

//! Deterministic stand-ins for the four LLM roles.
//!
//! Each mock reads the prompt built by the corresponding pipeline stage and
//! answers by a fixed rule, so the whole loop can run without a model. The
//! rules are documented on each type and are what fixture tests reason about.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde_json::{json, Value};

use crate::embedding::{similarity, tokenize, Embedder, HashingEmbedder, Normalization};
use crate::llm::{LlmClient, LlmClientKind, LlmError};

const STOPWORDS: &[&str] = &[
    "a", "about", "after", "all", "am", "an", "and", "any", "are", "as", "at", "be", "been",
    "before", "but", "by", "can", "could", "did", "do", "does", "for", "from", "had", "has",
    "have", "how", "i", "if", "in", "into", "is", "it", "its", "just", "me", "my", "of", "on",
    "or", "our", "so", "some", "that", "the", "their", "them", "then", "there", "these", "they",
    "this", "to", "too", "up", "us", "was", "we", "were", "what", "when", "where", "which",
    "who", "why", "will", "with", "would", "you", "your",
];

/// Lowercased tokens of `text` with common function words removed.
pub fn content_tokens(text: &str) -> BTreeSet<String> {
    tokenize(text).into_iter().filter(|t| !STOPWORDS.contains(&t.as_str())).collect()
}

/// Text of the last line beginning with `prefix`, with the prefix removed.
fn last_line_after<'a>(prompt: &'a str, prefix: &str) -> Option<&'a str> {
    prompt.lines().rev().find_map(|l| l.strip_prefix(prefix))
}

/// The slice between the last `start` marker and the last `end` marker after it.
fn last_section<'a>(prompt: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = prompt.rfind(start)? + start.len();
    let rest = &prompt[from..];
    let to = rest.rfind(end).unwrap_or(rest.len());
    Some(&rest[..to])
}

#[derive(Debug, Default)]
struct Counter(AtomicUsize);

impl Counter {
    fn bump(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }

    fn get(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }
}

/// Cites every memory whose raw turns share at least two content tokens with
/// the query and answers with the summary of the best-overlapping memory
/// (lowest index on ties). Without a qualifying memory it declines with
/// `[NO_CITE]`.
#[derive(Debug, Default)]
pub struct MockGenerator {
    calls: Counter,
}

struct RenderedMemory {
    index: usize,
    summary: String,
    raw: String,
}

impl MockGenerator {
    pub fn new() -> Self {
        Self::default()
    }

    pub const DECLINE: &'static str = "I don't have enough information to answer that.";

    fn memories(prompt: &str) -> Vec<RenderedMemory> {
        let Some(section) = last_section(prompt, "\n- Memories:\n", "\nOutput:") else {
            return Vec::new();
        };
        let mut out: Vec<RenderedMemory> = Vec::new();
        for line in section.lines() {
            let line = line.trim_start();
            if let Some(rest) = line.strip_prefix("- Memory [") {
                if let Some((idx, summary)) = rest.split_once("]: ") {
                    if let Ok(index) = idx.parse() {
                        out.push(RenderedMemory { index, summary: summary.to_owned(), raw: String::new() });
                    }
                }
                continue;
            }
            let utterance = line
                .strip_prefix("* Speaker 1: ")
                .or_else(|| line.strip_prefix("Speaker 1: "))
                .or_else(|| line.strip_prefix("Speaker 2: "));
            if let (Some(u), Some(cur)) = (utterance, out.last_mut()) {
                cur.raw.push_str(u);
                cur.raw.push('\n');
            }
        }
        out
    }
}

impl LlmClient for MockGenerator {
    fn client_id(&self) -> &str {
        "mock-generator"
    }

    fn kind(&self) -> LlmClientKind {
        LlmClientKind::MockGenerator
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.calls.bump();
        let query = last_line_after(prompt, "- User Query: ").unwrap_or("");
        let query = query.strip_prefix("SPEAKER_1: ").unwrap_or(query);
        let q = content_tokens(query);
        let mut cited = Vec::new();
        let mut best: Option<(usize, &str)> = None;
        let memories = Self::memories(prompt);
        for m in &memories {
            let overlap = content_tokens(&m.raw).intersection(&q).count();
            if overlap >= 2 {
                cited.push(m.index.to_string());
                if best.is_none_or(|(b, _)| overlap > b) {
                    best = Some((overlap, &m.summary));
                }
            }
        }
        Ok(match best {
            Some((_, summary)) => format!("{summary} [{}]", cited.join(", ")),
            None => format!("{} [NO_CITE]", Self::DECLINE),
        })
    }

    fn call_count(&self) -> usize {
        self.calls.get()
    }
}

/// Splits the session at turns whose target-speaker utterance starts with the
/// marker token. Each segment becomes one memory summarized by that utterance
/// with the marker removed; turns before the first marker join the first
/// segment. A session without markers yields `NO_TRAIT`.
#[derive(Debug)]
pub struct MockExtractor {
    marker: String,
    calls: Counter,
}

impl Default for MockExtractor {
    fn default() -> Self {
        Self::new("#topic")
    }
}

impl MockExtractor {
    pub fn new(marker: impl Into<String>) -> Self {
        Self { marker: marker.into(), calls: Counter::default() }
    }

    pub fn marker(&self) -> &str {
        &self.marker
    }
}

impl LlmClient for MockExtractor {
    fn client_id(&self) -> &str {
        "mock-extractor"
    }

    fn kind(&self) -> LlmClientKind {
        LlmClientKind::MockExtractor
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.calls.bump();
        let speaker = prompt
            .rfind("summaries for SPEAKER_")
            .and_then(|i| prompt[i + "summaries for SPEAKER_".len()..].chars().next())
            .unwrap_or('1');
        let speaker_prefix = format!("- SPEAKER_{speaker}: ");
        let section = last_section(prompt, "\nInput:\n", "\nOutput:").unwrap_or("");

        let mut segments: Vec<(String, Vec<usize>)> = Vec::new();
        let mut leading: Vec<usize> = Vec::new();
        let mut turn: Option<usize> = None;
        for line in section.lines() {
            let line = line.trim_start();
            if let Some(rest) = line.strip_prefix("- Turn ") {
                turn = rest.trim_end_matches(':').parse().ok();
                continue;
            }
            let (Some(t), Some(text)) = (turn, line.strip_prefix(&speaker_prefix)) else {
                continue;
            };
            let first = text.split_whitespace().next();
            if first == Some(self.marker.as_str()) {
                let rest = text[text.find(&self.marker).unwrap_or(0) + self.marker.len()..].trim();
                let summary = if rest.is_empty() { text.trim() } else { rest };
                let mut refs = std::mem::take(&mut leading);
                refs.push(t);
                segments.push((summary.to_owned(), refs));
            } else if let Some(last) = segments.last_mut() {
                last.1.push(t);
            } else {
                leading.push(t);
            }
        }
        if segments.is_empty() {
            return Ok("NO_TRAIT".into());
        }
        let memories: Vec<Value> = segments
            .into_iter()
            .map(|(summary, reference)| json!({"summary": summary, "reference": reference}))
            .collect();
        Ok(serde_json::to_string_pretty(&json!({ "extracted_memories": memories }))
            .expect("json value serializes"))
    }

    fn call_count(&self) -> usize {
        self.calls.get()
    }
}

/// Merges into the most similar history summary when the hashing-embedder
/// cosine exceeds the threshold, with merged text `"old; new"`; otherwise adds.
#[derive(Debug)]
pub struct MockDecider {
    embedder: HashingEmbedder,
    threshold: f64,
    calls: Counter,
}

impl Default for MockDecider {
    fn default() -> Self {
        Self::new(HashingEmbedder::new(256, Normalization::UnitL2), 0.8)
    }
}

impl MockDecider {
    pub fn new(embedder: HashingEmbedder, threshold: f64) -> Self {
        Self { embedder, threshold, calls: Counter::default() }
    }
}

impl LlmClient for MockDecider {
    fn client_id(&self) -> &str {
        "mock-decider"
    }

    fn kind(&self) -> LlmClientKind {
        LlmClientKind::MockDecider
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.calls.bump();
        let parse = |prefix: &str, key: &str| -> Option<Value> {
            let v: Value = serde_json::from_str(last_line_after(prompt, prefix)?).ok()?;
            v.get(key).cloned()
        };
        let history: Vec<String> = parse("- History Personal Summaries: ", "history_summaries")
            .and_then(|v| serde_json::from_value(v).ok())
            .unwrap_or_default();
        let new = parse("- New Personal Summary: ", "new_summary")
            .and_then(|v| v.as_str().map(str::to_owned))
            .ok_or_else(|| LlmError::InvalidResponse("no new summary in prompt".into()))?;
        let Ok(new_vec) = self.embedder.embed(&new) else {
            return Ok("Add()".into());
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, h) in history.iter().enumerate() {
            let Ok(v) = self.embedder.embed(h) else { continue };
            let s = similarity(&new_vec, &v).unwrap_or(0.0);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((i, s));
            }
        }
        Ok(match best {
            Some((i, s)) if s > self.threshold => format!("Merge({i}, {}; {new})", history[i]),
            _ => "Add()".into(),
        })
    }

    fn call_count(&self) -> usize {
        self.calls.get()
    }
}

/// Says `Yes` iff the normalized gold answer is a substring of the normalized
/// response. Normalization lowercases and keeps alphanumeric tokens.
#[derive(Debug, Default)]
pub struct MockJudge {
    calls: Counter,
}

impl MockJudge {
    pub fn new() -> Self {
        Self::default()
    }
}

pub fn normalize_answer(text: &str) -> String {
    tokenize(text).join(" ")
}

impl LlmClient for MockJudge {
    fn client_id(&self) -> &str {
        "mock-judge"
    }

    fn kind(&self) -> LlmClientKind {
        LlmClientKind::MockJudge
    }

    fn complete(&self, prompt: &str) -> Result<String, LlmError> {
        self.calls.bump();
        let gold = normalize_answer(last_line_after(prompt, "- Ground-truth Answer: ").unwrap_or(""));
        let response = normalize_answer(last_line_after(prompt, "- Response: ").unwrap_or(""));
        let yes = !gold.is_empty() && response.contains(&gold);
        Ok(if yes { "Yes" } else { "No" }.into())
    }

    fn call_count(&self) -> usize {
        self.calls.get()
    }
}

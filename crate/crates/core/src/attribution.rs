//! Generation with self-citation: prompt construction, citation parsing, and
//! the citation-to-reward mapping.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::llm::{LlmClient, LlmError};
use crate::memory_bank::MemoryEntry;
use crate::prompts::{flatten, render, PromptId};
use crate::reranker::RewardVector;
use crate::transcript::Turn;

static CITATION_GROUP: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[\s*(\d+(?:\s*,\s*\d+)*)\s*\]").expect("valid regex"));
static NO_CITE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[NO_CITE\]").expect("valid regex"));

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Cited,
    NoCite,
    MalformedRecovered,
    MalformedFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributedResponse {
    pub text: String,
    pub citations: Vec<usize>,
    pub parse_status: ParseStatus,
    pub raw: String,
}

/// A memory as shown to the generator: the entry and its resolved turns.
pub struct PresentedMemory<'a> {
    pub entry: &'a MemoryEntry,
    pub turns: Vec<&'a Turn>,
}

fn render_turn(t: &Turn, indent: &str) -> String {
    format!(
        "{indent}* Speaker 1: {}\n{indent}  Speaker 2: {}",
        flatten(&t.user_utterance),
        flatten(&t.agent_utterance)
    )
}

pub fn render_memories(memories: &[PresentedMemory<'_>]) -> String {
    if memories.is_empty() {
        return "  (none)".into();
    }
    let mut blocks = Vec::with_capacity(memories.len());
    for (i, m) in memories.iter().enumerate() {
        let mut block = format!("  - Memory [{i}]: {}", flatten(&m.entry.topic_summary));
        for t in &m.turns {
            block.push('\n');
            block.push_str(&render_turn(t, "    "));
        }
        blocks.push(block);
    }
    blocks.join("\n")
}

pub fn build_generation_prompt(
    query: &str,
    session_context: &[Turn],
    memories: &[PresentedMemory<'_>],
) -> String {
    let context = if session_context.is_empty() {
        "  (none)".to_owned()
    } else {
        session_context.iter().map(|t| render_turn(t, "  ")).collect::<Vec<_>>().join("\n")
    };
    render(PromptId::Generation, &[&flatten(query), &context, &render_memories(memories)])
}

/// Extracts citation groups and `[NO_CITE]` from `raw`. Never fails; indices
/// at or above `m` are discarded.
pub fn parse_citations(raw: &str, m: usize) -> AttributedResponse {
    let mut cited = BTreeSet::new();
    let mut discarded = 0usize;
    let mut groups = 0usize;
    for cap in CITATION_GROUP.captures_iter(raw) {
        groups += 1;
        for part in cap[1].split(',') {
            match part.trim().parse::<usize>() {
                Ok(i) if i < m => {
                    cited.insert(i);
                }
                _ => discarded += 1,
            }
        }
    }
    let no_cite = NO_CITE.is_match(raw);
    let parse_status = match (groups > 0, no_cite) {
        (false, false) => ParseStatus::MalformedFailed,
        (false, true) => ParseStatus::NoCite,
        (true, true) => ParseStatus::MalformedRecovered,
        (true, false) if discarded > 0 => ParseStatus::MalformedRecovered,
        (true, false) => ParseStatus::Cited,
    };
    let stripped = NO_CITE.replace_all(&CITATION_GROUP.replace_all(raw, ""), "").into_owned();
    let text = stripped
        .lines()
        .map(|l| l.split_whitespace().collect::<Vec<_>>().join(" "))
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_owned();
    AttributedResponse { text, citations: cited.into_iter().collect(), parse_status, raw: raw.to_owned() }
}

/// `+1` for each cited position, `-1` otherwise.
pub fn rewards_from_citations(resp: &AttributedResponse, m: usize) -> RewardVector {
    let rewards = (0..m).map(|i| if resp.citations.binary_search(&i).is_ok() { 1 } else { -1 }).collect();
    RewardVector::new(rewards).expect("rewards are ±1")
}

/// One completion call that yields both the answer and its citations.
pub fn generate(llm: &dyn LlmClient, prompt: &str, m: usize) -> Result<AttributedResponse, LlmError> {
    let raw = llm.complete(prompt)?;
    Ok(parse_citations(&raw, m))
}

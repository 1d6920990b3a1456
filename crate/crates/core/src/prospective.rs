//! End-of-session reflection: extract topic memories from a closed session and
//! fold each one into the bank by an add-or-merge decision.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::warn;

use crate::canonical::atomic_write;
use crate::clock::Clock;
use crate::embedding::Embedder;
use crate::llm::{LlmClient, LlmError};
use crate::memory_bank::{BankError, MemoryBank, MemoryEntry};
use crate::prompts::{flatten, render, PromptId, JSON_REPAIR_SUFFIX};
use crate::transcript::{SegmentRef, Session, TranscriptStore};

#[derive(Debug, Error)]
pub enum ProspectiveError {
    #[error(transparent)]
    LlmUnavailable(#[from] LlmError),
    #[error("malformed llm output: {0}")]
    MalformedLlmOutput(String),
    #[error("session {0} is not closed")]
    SessionNotClosed(String),
    #[error("session {0} has no turns")]
    EmptySession(String),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which side of the conversation a memory describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Agent,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Speaker::User => "SPEAKER_1",
            Speaker::Agent => "SPEAKER_2",
        }
    }

    fn prompt(self) -> PromptId {
        match self {
            Speaker::User => PromptId::ExtractionSpeaker1,
            Speaker::Agent => PromptId::ExtractionSpeaker2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExtractedMemory {
    pub summary: String,
    pub reference: Vec<usize>,
    pub owner: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Extraction {
    pub memories: Vec<ExtractedMemory>,
    /// Memories discarded for empty summaries or references outside the session.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UpdateAction {
    Add,
    Merge { merge_index: usize, merged_summary: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedActions {
    pub actions: Vec<UpdateAction>,
    /// Merges whose index was out of range and were turned into adds.
    pub degraded: usize,
}

pub fn render_session(session: &Session) -> String {
    session
        .turns
        .iter()
        .map(|t| {
            format!(
                "- Turn {}:\n  - SPEAKER_1: {}\n  - SPEAKER_2: {}",
                t.index,
                flatten(&t.user_utterance),
                flatten(&t.agent_utterance)
            )
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses an extraction answer. `Ok(None)` means the answer was not JSON at all.
fn parse_extraction(raw: &str, turns: usize, owner: &str) -> Option<Extraction> {
    let (Some(start), Some(end)) = (raw.find('{'), raw.rfind('}')) else {
        return raw.contains("NO_TRAIT").then(Extraction::default);
    };
    if end < start {
        return None;
    }
    let value: Value = serde_json::from_str(&raw[start..=end]).ok()?;
    let items = value.get("extracted_memories")?.as_array()?;
    let mut out = Extraction::default();
    for item in items {
        let summary = item.get("summary").and_then(Value::as_str).map(str::trim).unwrap_or("");
        let refs = item.get("reference").map(flatten_refs).unwrap_or_default();
        let refs = match refs {
            Some(r) if !r.is_empty() && r.iter().all(|&i| i < turns) => r,
            _ => {
                out.dropped += 1;
                continue;
            }
        };
        if summary.is_empty() {
            out.dropped += 1;
            continue;
        }
        let mut refs = refs;
        refs.sort_unstable();
        refs.dedup();
        out.memories.push(ExtractedMemory {
            summary: summary.to_owned(),
            reference: refs,
            owner: owner.to_owned(),
        });
    }
    Some(out)
}

/// Accepts `[3, 4]` and the bracketed-id form `[[3], [4]]`.
fn flatten_refs(v: &Value) -> Option<Vec<usize>> {
    match v {
        Value::Number(n) => n.as_u64().map(|x| vec![x as usize]),
        Value::Array(items) => {
            let mut out = Vec::new();
            for i in items {
                out.extend(flatten_refs(i)?);
            }
            Some(out)
        }
        _ => None,
    }
}

/// Extracts `speaker`'s memories from a closed session, retrying once when the
/// first answer is not parseable.
pub fn extract_memories(
    session: &Session,
    speaker: Speaker,
    owner: &str,
    llm: &dyn LlmClient,
) -> Result<Extraction, ProspectiveError> {
    if !session.closed {
        return Err(ProspectiveError::SessionNotClosed(session.session_id.clone()));
    }
    if session.is_empty() {
        return Err(ProspectiveError::EmptySession(session.session_id.clone()));
    }
    let prompt = render(speaker.prompt(), &[&render_session(session)]);
    let raw = llm.complete(&prompt)?;
    let extraction = match parse_extraction(&raw, session.len(), owner) {
        Some(e) => e,
        None => {
            let retry = llm.complete(&format!("{prompt}{JSON_REPAIR_SUFFIX}"))?;
            parse_extraction(&retry, session.len(), owner).ok_or_else(|| {
                ProspectiveError::MalformedLlmOutput(format!("extraction is not valid JSON: {retry}"))
            })?
        }
    };
    if extraction.dropped > 0 {
        warn!(session = %session.session_id, dropped = extraction.dropped, "dropped extracted memories");
    }
    Ok(extraction)
}

fn parse_action_line(line: &str) -> Option<UpdateAction> {
    let inner = line.strip_suffix(')')?;
    if let Some(args) = inner.strip_prefix("Add(") {
        return args.trim().is_empty().then_some(UpdateAction::Add);
    }
    let args = inner.strip_prefix("Merge(")?;
    let (idx, text) = args.split_once(',')?;
    let merge_index = idx.trim().parse().ok()?;
    let merged_summary = text.trim();
    if merged_summary.is_empty() {
        return None;
    }
    Some(UpdateAction::Merge { merge_index, merged_summary: merged_summary.to_owned() })
}

/// Parses one action per line. Blank lines and code fences are ignored.
pub fn parse_actions(raw: &str, candidate_count: usize) -> Result<ParsedActions, ProspectiveError> {
    let mut out = ParsedActions::default();
    for line in raw.lines().map(str::trim) {
        if line.is_empty() || line.starts_with("```") {
            continue;
        }
        let action = parse_action_line(line)
            .ok_or_else(|| ProspectiveError::MalformedLlmOutput(format!("bad action line: {line}")))?;
        match action {
            UpdateAction::Merge { merge_index, .. } if merge_index >= candidate_count => {
                warn!(merge_index, candidate_count, "merge index out of range, adding instead");
                out.degraded += 1;
                out.actions.push(UpdateAction::Add);
            }
            a => out.actions.push(a),
        }
    }
    Ok(out)
}

pub fn render_actions(actions: &[UpdateAction]) -> String {
    actions
        .iter()
        .map(|a| match a {
            UpdateAction::Add => "Add()".to_owned(),
            UpdateAction::Merge { merge_index, merged_summary } => {
                format!("Merge({merge_index}, {merged_summary})")
            }
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn update_prompt(new_summary: &str, candidates: &[&MemoryEntry]) -> String {
    let history: Vec<String> = candidates.iter().map(|e| flatten(&e.topic_summary)).collect();
    let history = serde_json::json!({ "history_summaries": history }).to_string();
    let new = serde_json::json!({ "new_summary": flatten(new_summary) }).to_string();
    render(PromptId::Update, &[&history, &new])
}

/// Asks the decider how to integrate `new_memory`. No candidates means `Add`
/// without a call.
pub fn decide_update(
    new_memory: &ExtractedMemory,
    candidates: &[&MemoryEntry],
    llm: &dyn LlmClient,
) -> Result<ParsedActions, ProspectiveError> {
    if candidates.is_empty() {
        return Ok(ParsedActions { actions: vec![UpdateAction::Add], degraded: 0 });
    }
    let raw = llm.complete(&update_prompt(&new_memory.summary, candidates))?;
    parse_actions(&raw, candidates.len())
}

/// Sessions that have already been reflected, persisted one JSON string per line.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReflectedLedger {
    sessions: BTreeSet<String>,
}

impl ReflectedLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn contains(&self, session_id: &str) -> bool {
        self.sessions.contains(session_id)
    }

    pub fn mark(&mut self, session_id: &str) {
        self.sessions.insert(session_id.to_owned());
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::new();
        for s in &self.sessions {
            out.push_str(&serde_json::to_string(s).expect("string serializes"));
            out.push('\n');
        }
        atomic_write(path, out.as_bytes())
    }

    /// A missing file is an empty ledger.
    pub fn load(path: &Path) -> Result<Self, ProspectiveError> {
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::new()),
            Err(e) => return Err(e.into()),
        };
        let mut ledger = Self::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let id: String = serde_json::from_str(line).map_err(|e| {
                ProspectiveError::MalformedLlmOutput(format!("ledger line {}: {e}", i + 1))
            })?;
            ledger.sessions.insert(id);
        }
        Ok(ledger)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionReport {
    pub session_id: String,
    pub extracted: usize,
    pub added: usize,
    pub merged: usize,
    pub dropped: usize,
    pub failed: usize,
    pub degraded: usize,
    pub already_reflected: bool,
    pub added_entry_ids: Vec<String>,
    pub merged_entry_ids: Vec<String>,
}

/// The LLM clients and settings used by [`Reflector::reflect`].
pub struct Reflector<'a> {
    pub extractor: &'a dyn LlmClient,
    pub decider: &'a dyn LlmClient,
    pub embedder: &'a dyn Embedder,
    pub k_update: usize,
}

impl Reflector<'_> {
    /// Reflects a stored, closed session once. `owners` pairs each speaker
    /// side to reflect with the owner id its memories are filed under.
    pub fn reflect(
        &self,
        bank: &mut MemoryBank,
        transcripts: &TranscriptStore,
        ledger: &mut ReflectedLedger,
        session: &Session,
        owners: &[(Speaker, String)],
        clock: &dyn Clock,
    ) -> Result<ReflectionReport, ProspectiveError> {
        let mut report =
            ReflectionReport { session_id: session.session_id.clone(), ..Default::default() };
        if ledger.contains(&session.session_id) {
            report.already_reflected = true;
            return Ok(report);
        }
        if !session.closed {
            return Err(ProspectiveError::SessionNotClosed(session.session_id.clone()));
        }
        bank.check_embedder(self.embedder)?;
        if session.is_empty() {
            ledger.mark(&session.session_id);
            return Ok(report);
        }

        let extractions: Vec<Result<Extraction, ProspectiveError>> = std::thread::scope(|s| {
            let handles: Vec<_> = owners
                .iter()
                .map(|(speaker, owner)| {
                    s.spawn(move || extract_memories(session, *speaker, owner, self.extractor))
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("extraction thread panicked")).collect()
        });

        for extraction in extractions {
            let extraction = match extraction {
                Ok(e) => e,
                Err(e) => {
                    warn!(session = %session.session_id, error = %e, "extraction failed");
                    report.failed += 1;
                    continue;
                }
            };
            report.dropped += extraction.dropped;
            report.extracted += extraction.memories.len();
            for memory in &extraction.memories {
                if let Err(e) = self.integrate(bank, transcripts, session, memory, clock, &mut report) {
                    warn!(session = %session.session_id, error = %e, "memory integration failed");
                    report.failed += 1;
                }
            }
        }
        ledger.mark(&session.session_id);
        Ok(report)
    }

    fn integrate(
        &self,
        bank: &mut MemoryBank,
        transcripts: &TranscriptStore,
        session: &Session,
        memory: &ExtractedMemory,
        clock: &dyn Clock,
        report: &mut ReflectionReport,
    ) -> Result<(), ProspectiveError> {
        let segment = SegmentRef::new(&session.session_id, memory.reference.clone())
            .ok_or_else(|| ProspectiveError::MalformedLlmOutput("memory without references".into()))?;
        let candidate_ids = self.candidates(bank, memory)?;
        let parsed = {
            let candidates: Vec<&MemoryEntry> =
                candidate_ids.iter().filter_map(|id| bank.get(id)).collect();
            decide_update(memory, &candidates, self.decider)?
        };
        report.degraded += parsed.degraded;
        for action in parsed.actions {
            match action {
                UpdateAction::Add => {
                    let entry = bank.new_entry(
                        &memory.owner,
                        &memory.summary,
                        vec![segment.clone()],
                        self.embedder,
                        clock.now(),
                    )?;
                    let id = entry.entry_id.clone();
                    bank.add_entry(entry, transcripts)?;
                    report.added += 1;
                    report.added_entry_ids.push(id);
                }
                UpdateAction::Merge { merge_index, merged_summary } => {
                    let target = &candidate_ids[merge_index];
                    bank.merge_entry(
                        target,
                        &merged_summary,
                        vec![segment.clone()],
                        self.embedder,
                        transcripts,
                        clock.now(),
                    )?;
                    report.merged += 1;
                    report.merged_entry_ids.push(target.clone());
                }
            }
        }
        Ok(())
    }

    /// Ids of the `k_update` entries of the same owner most similar to the memory.
    fn candidates(
        &self,
        bank: &MemoryBank,
        memory: &ExtractedMemory,
    ) -> Result<Vec<String>, ProspectiveError> {
        if bank.is_empty() || self.k_update == 0 {
            return Ok(Vec::new());
        }
        let ranked = bank.search_text(self.embedder, &memory.summary, bank.len())?;
        Ok(ranked
            .into_iter()
            .filter(|r| bank.get(&r.entry_id).is_some_and(|e| e.owner == memory.owner))
            .take(self.k_update)
            .map(|r| r.entry_id)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::LogicalClock;
    use crate::embedding::{HashingEmbedder, Normalization};
    use crate::llm::ScriptedClient;
    use crate::memory_bank::IngestionMode;
    use crate::mock::{MockDecider, MockExtractor};

    fn session(id: &str, users: &[&str]) -> Session {
        let mut s = Session::new(id);
        for u in users {
            s.push_turn(*u, "ok", None).unwrap();
        }
        s.close();
        s
    }

    #[test]
    fn parse_actions_grammar() {
        assert_eq!(parse_actions("Add()", 0).unwrap().actions, vec![UpdateAction::Add]);
        assert_eq!(
            parse_actions("  Merge(0, a, b, and c.)  ", 1).unwrap().actions,
            vec![UpdateAction::Merge { merge_index: 0, merged_summary: "a, b, and c.".into() }]
        );
        let two = parse_actions("Add()\nMerge(1, s)", 3).unwrap();
        assert_eq!(two.actions.len(), 2);
        assert!(matches!(parse_actions("Delete(2)", 3), Err(ProspectiveError::MalformedLlmOutput(m)) if m.contains("Delete(2)")));
        let degraded = parse_actions("Merge(4, x)", 3).unwrap();
        assert_eq!(degraded.actions, vec![UpdateAction::Add]);
        assert_eq!(degraded.degraded, 1);
        assert!(parse_actions("```\nAdd()\n```\n\n", 0).unwrap().actions.len() == 1);
        assert!(parse_actions("Merge(x, y)", 3).is_err());
        assert!(parse_actions("Merge(0, )", 3).is_err());
    }

    #[test]
    fn worked_merge_example_parses() {
        let raw = "Merge(0, SPEAKER_1 exercises every Monday and Thursday, although he doesn't particularly enjoy it.)";
        assert_eq!(
            parse_actions(raw, 1).unwrap().actions,
            vec![UpdateAction::Merge {
                merge_index: 0,
                merged_summary: "SPEAKER_1 exercises every Monday and Thursday, although he doesn't particularly enjoy it.".into()
            }]
        );
    }

    #[test]
    fn extraction_json_and_sentinel() {
        let s = session("s", &["a", "b", "c", "d"]);
        let json = r#"Here you go: {"extracted_memories":[
            {"summary":"SPEAKER_1 has heard good things about the NordicTrack treadmill.","reference":[3]},
            {"summary":"bad ref","reference":[9]},
            {"summary":"nested","reference":[[0],[2]]}]}"#;
        let c = ScriptedClient::ok("x", [json]);
        let e = extract_memories(&s, Speaker::User, "alice", &c).unwrap();
        assert_eq!(e.memories.len(), 2);
        assert_eq!(e.dropped, 1);
        assert!(e.memories[0].summary.contains("NordicTrack"));
        assert_eq!(e.memories[0].reference, vec![3]);
        assert_eq!(e.memories[1].reference, vec![0, 2]);

        let c = ScriptedClient::ok("x", ["NO_TRAIT"]);
        assert!(extract_memories(&s, Speaker::User, "alice", &c).unwrap().memories.is_empty());
    }

    #[test]
    fn extraction_repairs_once() {
        let s = session("s", &["a"]);
        let c = ScriptedClient::ok("x", ["{oops", r#"{"extracted_memories":[{"summary":"x","reference":[0]}]}"#]);
        assert_eq!(extract_memories(&s, Speaker::User, "o", &c).unwrap().memories.len(), 1);
        assert!(c.prompts()[1].ends_with(JSON_REPAIR_SUFFIX));
        let c = ScriptedClient::ok("x", ["{oops", "still {bad"]);
        assert!(matches!(
            extract_memories(&s, Speaker::User, "o", &c),
            Err(ProspectiveError::MalformedLlmOutput(_))
        ));
        assert_eq!(c.call_count(), 2);
    }

    #[test]
    fn mock_extractor_partitions_on_markers() {
        let s = session(
            "s",
            &["hello there", "#topic I adopted a cat", "she is grey", "#topic I play chess", "weekly"],
        );
        let e = extract_memories(&s, Speaker::User, "alice", &MockExtractor::default()).unwrap();
        assert_eq!(e.memories.len(), 2);
        assert_eq!(e.memories[0].summary, "I adopted a cat");
        assert_eq!(e.memories[0].reference, vec![0, 1, 2]);
        assert_eq!(e.memories[1].reference, vec![3, 4]);
        let agent = extract_memories(&s, Speaker::Agent, "agent", &MockExtractor::default()).unwrap();
        assert!(agent.memories.is_empty());
    }

    #[test]
    fn empty_candidates_force_add_without_call() {
        let c = ScriptedClient::ok("x", Vec::<String>::new());
        let m = ExtractedMemory { summary: "x".into(), reference: vec![0], owner: "o".into() };
        assert_eq!(decide_update(&m, &[], &c).unwrap().actions, vec![UpdateAction::Add]);
        assert_eq!(c.call_count(), 0);
    }

    struct Fixture {
        bank: MemoryBank,
        store: TranscriptStore,
        ledger: ReflectedLedger,
        embedder: HashingEmbedder,
        clock: LogicalClock,
    }

    fn fixture() -> Fixture {
        let embedder = HashingEmbedder::new(256, Normalization::UnitL2);
        Fixture {
            bank: MemoryBank::new("b", "alice", embedder.config(), IngestionMode::Topic),
            store: TranscriptStore::new(),
            ledger: ReflectedLedger::new(),
            embedder,
            clock: LogicalClock::new(),
        }
    }

    #[test]
    fn reflect_adds_then_merges_and_is_guarded() {
        let mut f = fixture();
        let extractor = MockExtractor::default();
        let decider = MockDecider::default();
        let r = Reflector { extractor: &extractor, decider: &decider, embedder: &f.embedder, k_update: 5 };
        let owners = [(Speaker::User, "alice".to_string())];

        let s1 = session(
            "s1",
            &["#topic I adopted a grey cat named Miso", "#topic I play chess every weekend", "#topic my sister lives in Oslo"],
        );
        f.store.insert(s1.clone()).unwrap();
        let rep = r.reflect(&mut f.bank, &f.store, &mut f.ledger, &s1, &owners, &f.clock).unwrap();
        assert_eq!((rep.extracted, rep.added, rep.merged), (3, 3, 0));
        assert_eq!(f.bank.len(), 3);

        let s2 = session("s2", &["#topic I play chess every single weekend"]);
        f.store.insert(s2.clone()).unwrap();
        let rep = r.reflect(&mut f.bank, &f.store, &mut f.ledger, &s2, &owners, &f.clock).unwrap();
        assert_eq!((rep.extracted, rep.added, rep.merged), (1, 0, 1));
        assert_eq!(f.bank.len(), 3);
        let merged = f.bank.get(&rep.merged_entry_ids[0]).unwrap();
        assert_eq!(
            merged.topic_summary,
            "I play chess every weekend; I play chess every single weekend"
        );
        assert_eq!(merged.segments.len(), 2);

        let again = r.reflect(&mut f.bank, &f.store, &mut f.ledger, &s2, &owners, &f.clock).unwrap();
        assert!(again.already_reflected);
        assert_eq!(f.bank.get(&rep.merged_entry_ids[0]).unwrap().merge_count, 1);
    }

    #[test]
    fn failing_memory_is_skipped() {
        let mut f = fixture();
        let extractor = ScriptedClient::ok(
            "x",
            [r#"{"extracted_memories":[{"summary":"one","reference":[0]},{"summary":"two","reference":[0]}]}"#],
        );
        let decider = ScriptedClient::ok("d", ["Remove()"]);
        let r = Reflector { extractor: &extractor, decider: &decider, embedder: &f.embedder, k_update: 5 };
        let s = session("s", &["hi"]);
        f.store.insert(s.clone()).unwrap();
        let rep = r
            .reflect(&mut f.bank, &f.store, &mut f.ledger, &s, &[(Speaker::User, "alice".into())], &f.clock)
            .unwrap();
        assert_eq!((rep.extracted, rep.added, rep.failed), (2, 1, 1));
    }

    #[test]
    fn ledger_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("reflected.jsonl");
        let mut l = ReflectedLedger::new();
        l.mark("s2");
        l.mark("s1");
        l.save(&p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "\"s1\"\n\"s2\"\n");
        assert_eq!(ReflectedLedger::load(&p).unwrap(), l);
        assert!(ReflectedLedger::load(&dir.path().join("none")).unwrap().is_empty());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn action() -> impl Strategy<Value = UpdateAction> {
            prop_oneof![
                Just(UpdateAction::Add),
                (0usize..8, "[a-zA-Z0-9,.;:()'! ]{0,40}[a-zA-Z0-9.)]").prop_map(|(i, s)| {
                    UpdateAction::Merge { merge_index: i, merged_summary: s.trim().to_owned() }
                }),
            ]
        }

        proptest! {
            #[test]
            fn render_parse_round_trip(actions in prop::collection::vec(action(), 0..6)) {
                let parsed = parse_actions(&render_actions(&actions), 8).unwrap();
                prop_assert_eq!(parsed.actions, actions);
                prop_assert_eq!(parsed.degraded, 0);
            }
        }
    }
}

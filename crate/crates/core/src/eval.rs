//! Offline scoring: Recall@K over gold evidence turns, judged accuracy, and
//! token F1, plus side-by-side comparison of runs.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::embedding::tokenize;
use crate::llm::{LlmClient, LlmError};
use crate::prompts::{flatten, render, PromptId};
use crate::transcript::SegmentRef;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("question has no gold evidence")]
    EmptyGold,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("runs do not share the same question set")]
    QuestionSetMismatch,
    #[error("nothing to compare")]
    NoReports,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalQuestion {
    pub qid: String,
    pub question: String,
    pub gold_answer: String,
    #[serde(default)]
    pub gold_evidence: Vec<SegmentRef>,
    /// Session after which the question may be asked. Scripts place every
    /// evidence session at or before it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub asked_after_session: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub qid: String,
    pub question: String,
    pub answer: String,
    pub gold_answer: String,
    /// Entry ids in rank order.
    pub retrieved: Vec<String>,
    /// Segments of each retrieved entry at answer time.
    pub retrieved_segments: Vec<Vec<SegmentRef>>,
    pub gold_evidence: Vec<SegmentRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge_verdict: Option<Verdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRunRecord {
    pub mode: String,
    pub seed: u64,
    pub config_hash: String,
    pub questions: Vec<QuestionRecord>,
}

impl EvalRunRecord {
    pub fn to_json(&self) -> String {
        to_canonical_string(self).expect("record serializes")
    }
}

/// Fraction of gold turns covered by the segments of the first `k` entries.
pub fn recall_at_k(
    retrieved_segments: &[Vec<SegmentRef>],
    gold: &[SegmentRef],
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let gold: BTreeSet<(&str, usize)> = gold
        .iter()
        .flat_map(|g| g.turn_indices.iter().map(move |&t| (g.session_id.as_str(), t)))
        .collect();
    if gold.is_empty() {
        return Err(EvalError::EmptyGold);
    }
    let covered = gold
        .iter()
        .filter(|(s, t)| retrieved_segments.iter().take(k).flatten().any(|seg| seg.contains(s, *t)))
        .count();
    Ok(covered as f64 / gold.len() as f64)
}

pub fn judge_prompt(question: &str, gold_answer: &str, response: &str) -> String {
    render(PromptId::Judge, &[&flatten(question), &flatten(gold_answer), &flatten(response)])
}

/// Reads the first token of the first line. Anything but yes/no is a
/// malformed `No`.
pub fn parse_judge(raw: &str) -> (Verdict, bool) {
    let token = raw
        .trim_start()
        .lines()
        .next()
        .and_then(|l| l.split_whitespace().next())
        .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase());
    match token.as_deref() {
        Some("yes") => (Verdict::Yes, false),
        Some("no") => (Verdict::No, false),
        _ => (Verdict::No, true),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub verdict: Verdict,
    pub malformed: bool,
}

pub fn judge_accuracy(
    question: &str,
    gold_answer: &str,
    response: &str,
    judge: &dyn LlmClient,
) -> Result<JudgeOutcome, LlmError> {
    let raw = judge.complete(&judge_prompt(question, gold_answer, response))?;
    let (verdict, malformed) = parse_judge(&raw);
    Ok(JudgeOutcome { verdict, malformed })
}

/// Token-multiset F1. The flag is set when the gold answer has no tokens.
pub fn token_f1(response: &str, gold_answer: &str) -> (f64, bool) {
    let gold = tokenize(gold_answer);
    if gold.is_empty() {
        return (0.0, true);
    }
    let resp = tokenize(response);
    if resp.is_empty() {
        return (0.0, false);
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold {
        *counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &resp {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return (0.0, false);
    }
    let p = common as f64 / resp.len() as f64;
    let r = common as f64 / gold.len() as f64;
    (2.0 * p * r / (p + r), false)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionMetrics {
    pub qid: String,
    pub recall_at_k: Option<f64>,
    pub verdict: Verdict,
    pub judge_malformed: bool,
    pub token_f1: f64,
    pub empty_gold_answer: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub recall_at_k: f64,
    pub accuracy: f64,
    pub token_f1: f64,
    pub questions: usize,
    pub recall_scored: usize,
    pub recall_skipped_empty_gold: usize,
    pub judge_malformed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: String,
    pub seed: u64,
    pub config_hash: String,
    pub k: usize,
    pub aggregates: Aggregates,
    pub questions: Vec<QuestionMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        to_canonical_string(self).expect("report serializes")
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores every question of a run. The judge is asked afresh for each answer.
pub fn evaluate(
    record: &EvalRunRecord,
    judge: &dyn LlmClient,
    k: usize,
) -> Result<MetricsReport, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let mut questions = Vec::with_capacity(record.questions.len());
    for q in &record.questions {
        let recall = match recall_at_k(&q.retrieved_segments, &q.gold_evidence, k) {
            Ok(r) => Some(r),
            Err(EvalError::EmptyGold) => None,
            Err(e) => return Err(e),
        };
        let outcome = judge_accuracy(&q.question, &q.gold_answer, &q.answer, judge)?;
        let (f1, empty_gold_answer) = token_f1(&q.answer, &q.gold_answer);
        questions.push(QuestionMetrics {
            qid: q.qid.clone(),
            recall_at_k: recall,
            verdict: outcome.verdict,
            judge_malformed: outcome.malformed,
            token_f1: f1,
            empty_gold_answer,
        });
    }
    let aggregates = Aggregates {
        recall_at_k: mean(questions.iter().filter_map(|q| q.recall_at_k)),
        accuracy: mean(questions.iter().map(|q| if q.verdict == Verdict::Yes { 1.0 } else { 0.0 })),
        token_f1: mean(questions.iter().map(|q| q.token_f1)),
        questions: questions.len(),
        recall_scored: questions.iter().filter(|q| q.recall_at_k.is_some()).count(),
        recall_skipped_empty_gold: questions.iter().filter(|q| q.recall_at_k.is_none()).count(),
        judge_malformed: questions.iter().filter(|q| q.judge_malformed).count(),
    };
    Ok(MetricsReport {
        mode: record.mode.clone(),
        seed: record.seed,
        config_hash: record.config_hash.clone(),
        k,
        aggregates,
        questions,
    })
}

/// Minimum aggregate values a run must reach.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricFloors {
    #[serde(default)]
    pub recall_at_k: Option<f64>,
    #[serde(default)]
    pub accuracy: Option<f64>,
    #[serde(default)]
    pub token_f1: Option<f64>,
}

impl MetricFloors {
    /// Human-readable description of each floor the report misses.
    pub fn failures(&self, report: &MetricsReport) -> Vec<String> {
        let a = &report.aggregates;
        [("recall_at_k", self.recall_at_k, a.recall_at_k), ("accuracy", self.accuracy, a.accuracy), ("token_f1", self.token_f1, a.token_f1)]
            .into_iter()
            .filter_map(|(name, floor, got)| {
                floor.filter(|f| got < *f).map(|f| format!("{name} {got} is below floor {f}"))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub mode: String,
    pub seed: u64,
    pub recall_at_k: f64,
    pub accuracy: f64,
    pub token_f1: f64,
    pub questions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub k: usize,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn to_json(&self) -> String {
        to_canonical_string(self).expect("comparison serializes")
    }

    fn cells(&self) -> Vec<[String; 5]> {
        let mut out = vec![[
            "mode".to_owned(),
            format!("recall@{}", self.k),
            "accuracy".to_owned(),
            "token_f1".to_owned(),
            "questions".to_owned(),
        ]];
        for r in &self.rows {
            out.push([
                r.mode.clone(),
                format!("{:.4}", r.recall_at_k),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.token_f1),
                r.questions.to_string(),
            ]);
        }
        out
    }

    pub fn to_table(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> =
            (0..5).map(|c| cells.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        cells
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&widths)
                    .map(|(cell, w)| format!("{cell:<w$}"))
                    .collect::<Vec<_>>()
                    .join("  ")
                    .trim_end()
                    .to_owned()
            })
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    }

    pub fn to_tsv(&self) -> String {
        self.cells().iter().map(|r| r.join("\t")).collect::<Vec<_>>().join("\n") + "\n"
    }
}

pub fn compare_reports(reports: &[MetricsReport]) -> Result<Comparison, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    let qids = |r: &MetricsReport| r.questions.iter().map(|q| q.qid.clone()).collect::<BTreeSet<_>>();
    let expected = qids(first);
    if reports.iter().any(|r| qids(r) != expected || r.k != first.k) {
        return Err(EvalError::QuestionSetMismatch);
    }
    Ok(Comparison {
        k: first.k,
        rows: reports
            .iter()
            .map(|r| ComparisonRow {
                mode: r.mode.clone(),
                seed: r.seed,
                recall_at_k: r.aggregates.recall_at_k,
                accuracy: r.aggregates.accuracy,
                token_f1: r.aggregates.token_f1,
                questions: r.aggregates.questions,
            })
            .collect(),
    })
}

/// Scores each run and lays them side by side.
pub fn compare_modes(
    records: &[EvalRunRecord],
    judge: &dyn LlmClient,
    k: usize,
) -> Result<Comparison, EvalError> {
    let reports = records.iter().map(|r| evaluate(r, judge, k)).collect::<Result<Vec<_>, _>>()?;
    compare_reports(&reports)
}

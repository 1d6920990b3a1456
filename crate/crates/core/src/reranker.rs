//! The learnable reranking head.
//!
//! Query and memory embeddings pass through residual linear adapters,
//! `q' = q + W_q q` and `m' = m + W_m m`, and are scored by `s = q'·m'`. In
//! training mode the top `M` of `s/τ + g` (Gumbel noise `g`) are selected,
//! which samples an ordered subset from the Plackett–Luce distribution over
//! `s/τ`; inference takes the plain arg-top-M. Parameters move by REINFORCE
//! using citation rewards, with gradients written out by hand.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use crate::canonical::{atomic_write, to_canonical_string};
use crate::embedding::EmbeddingVector;

#[derive(Debug, Error)]
pub enum RerankerError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cannot select {m} of {k} candidates")]
    MTooLarge { m: usize, k: usize },
    #[error("trace no longer matches the parameters or inputs it was built from")]
    StaleTrace,
    #[error("update needs a training-mode trace")]
    TraceModeMismatch,
    #[error("reward vector has length {actual}, trace selected {expected}")]
    RewardLength { expected: usize, actual: usize },
    #[error("reward values must be +1 or -1")]
    InvalidReward,
    #[error("gradient has non-finite entries")]
    NonFiniteGradient,
    #[error("invalid reranker parameters: {0}")]
    InvalidParams(String),
    #[error("corrupt params file: {0}")]
    CorruptFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Dense square matrix stored row-major; serialized as nested rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    n: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, RerankerError> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * n);
        for r in rows {
            if r.len() != n {
                return Err(RerankerError::InvalidParams("matrix is not square".into()));
            }
            data.extend(r);
        }
        Ok(Self { n, data })
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.n + c] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `x + self·x`.
    pub fn residual(&self, x: &[f64]) -> Vec<f64> {
        self.data.chunks(self.n).zip(x).map(|(row, xi)| xi + dot(row, x)).collect()
    }

    /// `self += scale · a bᵀ`.
    fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        for (row, ai) in self.data.chunks_mut(self.n).zip(a) {
            let s = scale * ai;
            if s == 0.0 {
                continue;
            }
            for (x, bj) in row.iter_mut().zip(b) {
                *x += s * bj;
            }
        }
    }

    fn add_scaled(&mut self, scale: f64, other: &Matrix) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += scale * y;
        }
    }

    fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(rows).map_err(serde::de::Error::custom)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Train,
    Infer,
}

/// How rewards become the per-position advantage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Credit {
    /// Each selected position uses its own `r_t - b`.
    #[default]
    PerPosition,
    /// Every position uses `mean(r) - b`.
    SetMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankerParams {
    pub dimension: usize,
    pub w_q: Matrix,
    pub w_m: Matrix,
    pub tau: f64,
    pub eta: f64,
    pub baseline: f64,
    pub seed: u64,
    pub update_count: u64,
    pub credit: Credit,
    pub clip_norm: f64,
    pub batch_size: usize,
}

impl RerankerParams {
    /// Zero adapters with τ=0.5, η=1e-3, b=0.5, clip 10, batch 4.
    pub fn zero_init(dimension: usize, seed: u64) -> Self {
        Self {
            dimension,
            w_q: Matrix::zeros(dimension),
            w_m: Matrix::zeros(dimension),
            tau: 0.5,
            eta: 1e-3,
            baseline: 0.5,
            seed,
            update_count: 0,
            credit: Credit::PerPosition,
            clip_norm: 10.0,
            batch_size: 4,
        }
    }

    pub fn validate(&self) -> Result<(), RerankerError> {
        let bad = |m: &str| Err(RerankerError::InvalidParams(m.into()));
        if self.w_q.dim() != self.dimension || self.w_m.dim() != self.dimension {
            return Err(RerankerError::DimensionMismatch {
                expected: self.dimension,
                actual: if self.w_q.dim() != self.dimension { self.w_q.dim() } else { self.w_m.dim() },
            });
        }
        if !self.w_q.is_finite() || !self.w_m.is_finite() {
            return bad("matrix has non-finite entries");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !self.baseline.is_finite() {
            return bad("baseline must be finite");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }
}

/// Embeddings a trace was built from, kept so the update can recompute gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceInputs {
    pub query: Vec<f64>,
    pub memories: Vec<Vec<f64>>,
}

impl TraceInputs {
    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for x in self.query.iter().chain(self.memories.iter().flatten()) {
            h.update(x.to_bits().to_le_bytes());
        }
        h.update((self.memories.len() as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub candidate_entry_ids: Vec<String>,
    pub logits: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbed: Option<Vec<f64>>,
    pub selected_positions: Vec<usize>,
    pub log_prob: f64,
    pub mode: SelectionMode,
    pub tau: f64,
    pub params_generation: u64,
    pub input_fingerprint: String,
    #[serde(skip)]
    pub inputs: Option<Arc<TraceInputs>>,
}

impl SelectionTrace {
    pub fn selected_ids(&self) -> Vec<String> {
        self.selected_positions.iter().map(|&p| self.candidate_entry_ids[p].clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardVector {
    pub rewards: Vec<i8>,
}

impl RewardVector {
    pub fn new(rewards: Vec<i8>) -> Result<Self, RerankerError> {
        if rewards.iter().any(|r| *r != 1 && *r != -1) {
            return Err(RerankerError::InvalidReward);
        }
        Ok(Self { rewards })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.rewards.iter().filter(|r| **r > 0).count()
    }
}

/// Gradient of one log-term of the selection probability.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionGrad {
    pub d_wq: Matrix,
    pub d_wm: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub grad_norm_wq: f64,
    pub grad_norm_wm: f64,
    /// Σ_t of the advantage applied to each position.
    pub advantage_sum: f64,
    pub clipped: bool,
    /// Whether this call completed a batch and moved the parameters.
    pub applied: bool,
    pub pending: usize,
    pub update_count: u64,
}

/// Log-probability of picking `selected` in order under Plackett–Luce over `logits/τ`.
pub fn plackett_luce_log_prob(logits: &[f64], tau: f64, selected: &[usize]) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|s| s / tau).collect();
    let mut remaining = vec![true; logits.len()];
    let mut total = 0.0;
    for &i in selected {
        let lse = logsumexp(scaled.iter().zip(&remaining).filter(|(_, r)| **r).map(|(s, _)| *s));
        total += scaled[i] - lse;
        remaining[i] = false;
    }
    total.min(0.0)
}

/// Indices of the `m` largest values, best first; ties go to the lower index.
fn top_m(values: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

fn open_unit(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

#[derive(Clone)]
struct Pending {
    d_wq: Matrix,
    d_wm: Matrix,
    count: usize,
}

/// Parameters plus sampling state and the partially filled update batch.
#[derive(Clone)]
pub struct Reranker {
    params: RerankerParams,
    rng: ChaCha8Rng,
    generation: u64,
    pending: Pending,
}

impl std::fmt::Debug for Reranker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Reranker")
            .field("dimension", &self.params.dimension)
            .field("update_count", &self.params.update_count)
            .field("generation", &self.generation)
            .field("pending", &self.pending.count)
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsFile {
    #[serde(flatten)]
    params: RerankerParams,
    rng_word_pos: String,
}

impl Reranker {
    pub fn new(params: RerankerParams) -> Result<Self, RerankerError> {
        params.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(params.seed);
        let d = params.dimension;
        Ok(Self {
            params,
            rng,
            generation: 0,
            pending: Pending { d_wq: Matrix::zeros(d), d_wm: Matrix::zeros(d), count: 0 },
        })
    }

    pub fn zero_init(dimension: usize, seed: u64) -> Self {
        Self::new(RerankerParams::zero_init(dimension, seed)).expect("default params are valid")
    }

    pub fn params(&self) -> &RerankerParams {
        &self.params
    }

    /// Replaces the parameters, discarding any pending batch and invalidating traces.
    pub fn set_params(&mut self, params: RerankerParams) -> Result<(), RerankerError> {
        params.validate()?;
        let d = params.dimension;
        self.params = params;
        self.pending = Pending { d_wq: Matrix::zeros(d), d_wm: Matrix::zeros(d), count: 0 };
        self.generation += 1;
        Ok(())
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn pending(&self) -> usize {
        self.pending.count
    }

    pub fn dimension(&self) -> usize {
        self.params.dimension
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), RerankerError> {
        if v.len() != self.params.dimension {
            return Err(RerankerError::DimensionMismatch {
                expected: self.params.dimension,
                actual: v.len(),
            });
        }
        Ok(())
    }

    /// Residual adapters applied to the query and each memory.
    pub fn adapt(
        &self,
        q: &[f64],
        memories: &[&[f64]],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), RerankerError> {
        self.check_dim(q)?;
        for m in memories {
            self.check_dim(m)?;
        }
        let q2 = self.params.w_q.residual(q);
        let m2 = memories.iter().map(|m| self.params.w_m.residual(m)).collect();
        Ok((q2, m2))
    }

    pub fn score(q_adapted: &[f64], m_adapted: &[Vec<f64>]) -> Vec<f64> {
        m_adapted.iter().map(|m| dot(q_adapted, m)).collect()
    }

    /// Selects `m` positions from `logits`. Training mode draws Gumbel noise
    /// from the reranker's generator.
    pub fn select_top_m(
        &mut self,
        logits: &[f64],
        m: usize,
        mode: SelectionMode,
    ) -> Result<(Vec<usize>, Option<Vec<f64>>, f64), RerankerError> {
        if m > logits.len() {
            return Err(RerankerError::MTooLarge { m, k: logits.len() });
        }
        let tau = self.params.tau;
        let (selected, perturbed) = match mode {
            SelectionMode::Infer => (top_m(logits, m), None),
            SelectionMode::Train => {
                let perturbed: Vec<f64> = logits
                    .iter()
                    .map(|s| {
                        let u = open_unit(&mut self.rng);
                        s / tau - (-u.ln()).ln()
                    })
                    .collect();
                (top_m(&perturbed, m), Some(perturbed))
            }
        };
        let log_prob = plackett_luce_log_prob(logits, tau, &selected);
        Ok((selected, perturbed, log_prob))
    }

    /// Adapts, scores, and selects over `candidates` (entry id, embedding) in retrieval order.
    pub fn rerank(
        &mut self,
        query: &EmbeddingVector,
        candidates: &[(String, &EmbeddingVector)],
        m: usize,
        mode: SelectionMode,
    ) -> Result<SelectionTrace, RerankerError> {
        let memories: Vec<&[f64]> = candidates.iter().map(|(_, e)| e.as_slice()).collect();
        let (q2, m2) = self.adapt(query.as_slice(), &memories)?;
        let logits = Self::score(&q2, &m2);
        let (selected_positions, perturbed, log_prob) = self.select_top_m(&logits, m, mode)?;
        let inputs = TraceInputs {
            query: query.as_slice().to_vec(),
            memories: memories.iter().map(|m| m.to_vec()).collect(),
        };
        Ok(SelectionTrace {
            candidate_entry_ids: candidates.iter().map(|(id, _)| id.clone()).collect(),
            logits,
            perturbed,
            selected_positions,
            log_prob,
            mode,
            tau: self.params.tau,
            params_generation: self.generation,
            input_fingerprint: inputs.fingerprint(),
            inputs: Some(Arc::new(inputs)),
        })
    }

    fn check_fresh(&self, trace: &SelectionTrace, inputs: &TraceInputs) -> Result<(), RerankerError> {
        if trace.params_generation != self.generation
            || trace.tau != self.params.tau
            || inputs.fingerprint() != trace.input_fingerprint
        {
            return Err(RerankerError::StaleTrace);
        }
        Ok(())
    }

    /// Analytic gradient of each selected position's log-term.
    pub fn grad_log_prob(
        &self,
        q: &[f64],
        memories: &[&[f64]],
        trace: &SelectionTrace,
    ) -> Result<Vec<PositionGrad>, RerankerError> {
        let inputs = TraceInputs {
            query: q.to_vec(),
            memories: memories.iter().map(|m| m.to_vec()).collect(),
        };
        self.check_fresh(trace, &inputs)?;
        let (q2, m2) = self.adapt(q, memories)?;
        let logits = Self::score(&q2, &m2);
        let tau = self.params.tau;
        let d = self.params.dimension;
        let mut remaining = vec![true; logits.len()];
        let mut out = Vec::with_capacity(trace.selected_positions.len());
        for &chosen in &trace.selected_positions {
            let lse = logsumexp(
                logits.iter().zip(&remaining).filter(|(_, r)| **r).map(|(s, _)| s / tau),
            );
            // e_adapted = m'_chosen - Σ π_j m'_j, e_raw = m_chosen - Σ π_j m_j.
            let mut e_adapted = m2[chosen].clone();
            let mut e_raw = memories[chosen].to_vec();
            for (j, alive) in remaining.iter().enumerate() {
                if !alive {
                    continue;
                }
                let pi = (logits[j] / tau - lse).exp();
                for k in 0..d {
                    e_adapted[k] -= pi * m2[j][k];
                    e_raw[k] -= pi * memories[j][k];
                }
            }
            let mut d_wq = Matrix::zeros(d);
            d_wq.add_outer(1.0 / tau, &e_adapted, q);
            let mut d_wm = Matrix::zeros(d);
            d_wm.add_outer(1.0 / tau, &q2, &e_raw);
            out.push(PositionGrad { d_wq, d_wm });
            remaining[chosen] = false;
        }
        Ok(out)
    }

    /// Accumulates the REINFORCE step for `trace`; every `batch_size` calls the
    /// batch mean is applied as `W += η · mean`.
    pub fn reinforce_update(
        &mut self,
        trace: &SelectionTrace,
        rewards: &RewardVector,
    ) -> Result<UpdateStats, RerankerError> {
        if trace.mode != SelectionMode::Train {
            return Err(RerankerError::TraceModeMismatch);
        }
        if rewards.len() != trace.selected_positions.len() {
            return Err(RerankerError::RewardLength {
                expected: trace.selected_positions.len(),
                actual: rewards.len(),
            });
        }
        let inputs = trace.inputs.clone().ok_or(RerankerError::StaleTrace)?;
        let memories: Vec<&[f64]> = inputs.memories.iter().map(Vec::as_slice).collect();
        let grads = self.grad_log_prob(&inputs.query, &memories, trace)?;

        let b = self.params.baseline;
        let mean_r = if rewards.is_empty() {
            0.0
        } else {
            rewards.rewards.iter().map(|&r| f64::from(r)).sum::<f64>() / rewards.len() as f64
        };
        let d = self.params.dimension;
        let mut g_wq = Matrix::zeros(d);
        let mut g_wm = Matrix::zeros(d);
        let mut advantage_sum = 0.0;
        for (g, &r) in grads.iter().zip(&rewards.rewards) {
            let adv = match self.params.credit {
                Credit::PerPosition => f64::from(r) - b,
                Credit::SetMean => mean_r - b,
            };
            advantage_sum += adv;
            g_wq.add_scaled(adv, &g.d_wq);
            g_wm.add_scaled(adv, &g.d_wm);
        }
        if !g_wq.is_finite() || !g_wm.is_finite() {
            return Err(RerankerError::NonFiniteGradient);
        }
        let (nq, nm) = (g_wq.frobenius(), g_wm.frobenius());
        let norm = (nq * nq + nm * nm).sqrt();
        let clipped = norm > self.params.clip_norm;
        if clipped {
            warn!(norm, clip = self.params.clip_norm, "clipping reranker gradient");
            let s = self.params.clip_norm / norm;
            g_wq.scale(s);
            g_wm.scale(s);
        }
        self.pending.d_wq.add_scaled(1.0, &g_wq);
        self.pending.d_wm.add_scaled(1.0, &g_wm);
        self.pending.count += 1;

        let mut applied = false;
        if self.pending.count >= self.params.batch_size {
            self.flush()?;
            applied = true;
        }
        Ok(UpdateStats {
            grad_norm_wq: nq,
            grad_norm_wm: nm,
            advantage_sum,
            clipped,
            applied,
            pending: self.pending.count,
            update_count: self.params.update_count,
        })
    }

    /// Applies the mean of any pending gradients. Returns whether anything moved.
    pub fn flush(&mut self) -> Result<bool, RerankerError> {
        if self.pending.count == 0 {
            return Ok(false);
        }
        let step = self.params.eta / self.pending.count as f64;
        let mut w_q = self.params.w_q.clone();
        let mut w_m = self.params.w_m.clone();
        w_q.add_scaled(step, &self.pending.d_wq);
        w_m.add_scaled(step, &self.pending.d_wm);
        let d = self.params.dimension;
        self.pending = Pending { d_wq: Matrix::zeros(d), d_wm: Matrix::zeros(d), count: 0 };
        if !w_q.is_finite() || !w_m.is_finite() {
            return Err(RerankerError::NonFiniteGradient);
        }
        self.params.w_q = w_q;
        self.params.w_m = w_m;
        self.params.update_count += 1;
        self.generation += 1;
        Ok(true)
    }

    /// Canonical params file. The pending batch is not part of it.
    pub fn to_json(&self) -> String {
        let file = ParamsFile {
            params: self.params.clone(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        let mut s = to_canonical_string(&file).expect("params serialize");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, expected_dimension: Option<usize>) -> Result<Self, RerankerError> {
        let file: ParamsFile =
            serde_json::from_str(text).map_err(|e| RerankerError::CorruptFile(e.to_string()))?;
        if let Some(d) = expected_dimension {
            if file.params.dimension != d {
                return Err(RerankerError::DimensionMismatch { expected: d, actual: file.params.dimension });
            }
        }
        let pos: u128 = file
            .rng_word_pos
            .parse()
            .map_err(|_| RerankerError::CorruptFile("bad rng_word_pos".into()))?;
        let mut r = Self::new(file.params)?;
        r.rng.set_word_pos(pos);
        Ok(r)
    }

    pub fn save(&self, path: &Path) -> Result<(), RerankerError> {
        atomic_write(path, self.to_json().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected_dimension: Option<usize>) -> Result<Self, RerankerError> {
        Self::from_json(&fs::read_to_string(path)?, expected_dimension)
    }
}

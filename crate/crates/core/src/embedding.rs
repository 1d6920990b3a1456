//! Frozen retriever embeddings and dot-product similarity.
//!
//! Two embedders sit behind the [`Embedder`] trait: a deterministic token
//! hashing embedder for offline use, and an HTTP client for a remote
//! embedding service. Neither is ever trained.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// FNV-1a 64-bit offset basis.
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
/// FNV-1a 64-bit prime.
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbeddingError {
    #[error("text is empty")]
    EmptyText,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("remote embedder unavailable: {0}")]
    RemoteUnavailable(String),
    #[error("non-finite embedding component at index {0}")]
    NonFinite(usize),
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
}

/// A dense embedding. Components are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbeddingError> {
        if values.is_empty() {
            return Err(EmbeddingError::DimensionMismatch { expected: 1, actual: 0 });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbeddingError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Inner product of two equal-dimension embeddings.
pub fn similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbeddingError> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimensionMismatch { expected: a.dim(), actual: b.dim() });
    }
    Ok(dot(a.as_slice(), b.as_slice()))
}

/// Raw slice dot product; callers guarantee equal lengths.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Remote,
    Hashing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    None,
    UnitL2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedderConfig {
    pub embedder_id: String,
    pub dimension: usize,
    pub kind: EmbedderKind,
    pub endpoint: Option<String>,
    pub normalization: Normalization,
}

impl EmbedderConfig {
    /// Hashing embedder config; the id encodes kind, dimension and normalization.
    pub fn hashing(dimension: usize, normalization: Normalization) -> Self {
        let norm = match normalization {
            Normalization::None => "raw",
            Normalization::UnitL2 => "l2",
        };
        Self {
            embedder_id: format!("hashing-fnv1a-d{dimension}-{norm}"),
            dimension,
            kind: EmbedderKind::Hashing,
            endpoint: None,
            normalization,
        }
    }

    pub fn remote(
        model: &str,
        endpoint: impl Into<String>,
        dimension: usize,
        normalization: Normalization,
    ) -> Self {
        Self {
            embedder_id: format!("remote-{model}-d{dimension}"),
            dimension,
            kind: EmbedderKind::Remote,
            endpoint: Some(endpoint.into()),
            normalization,
        }
    }

    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.dimension == 0 {
            return Err(EmbeddingError::InvalidConfig("dimension must be positive".into()));
        }
        if self.embedder_id.trim().is_empty() {
            return Err(EmbeddingError::InvalidConfig("embedder_id is empty".into()));
        }
        match (self.kind, &self.endpoint) {
            (EmbedderKind::Remote, None) => {
                Err(EmbeddingError::InvalidConfig("remote embedder requires an endpoint".into()))
            }
            (EmbedderKind::Hashing, Some(_)) => {
                Err(EmbeddingError::InvalidConfig("hashing embedder takes no endpoint".into()))
            }
            _ => Ok(()),
        }
    }
}

/// The frozen retriever's embedding function.
pub trait Embedder: Send + Sync {
    fn config(&self) -> &EmbedderConfig;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        texts.iter().map(|t| self.embed(t)).collect()
    }

    fn embedder_id(&self) -> &str {
        &self.config().embedder_id
    }

    fn dimension(&self) -> usize {
        self.config().dimension
    }
}

/// Lowercases and splits on any non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect()
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

fn normalize(values: &mut [f64]) {
    let n = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        values.iter_mut().for_each(|x| *x /= n);
    }
}

/// Signed feature hashing of tokens into `dimension` buckets.
///
/// Each token is hashed with FNV-1a; the bucket is `hash % d` and the sign is
/// negative when bit 63 is set. Text with no tokens maps to the zero vector.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    config: EmbedderConfig,
}

impl HashingEmbedder {
    pub fn new(dimension: usize, normalization: Normalization) -> Self {
        Self { config: EmbedderConfig::hashing(dimension, normalization) }
    }

    pub fn from_config(config: EmbedderConfig) -> Result<Self, EmbeddingError> {
        config.validate()?;
        if config.kind != EmbedderKind::Hashing {
            return Err(EmbeddingError::InvalidConfig("not a hashing config".into()));
        }
        Ok(Self { config })
    }
}

impl Embedder for HashingEmbedder {
    fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if text.trim().is_empty() {
            return Err(EmbeddingError::EmptyText);
        }
        let d = self.config.dimension;
        let mut values = vec![0.0; d];
        for token in tokenize(text) {
            let h = fnv1a64(token.as_bytes());
            let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
            values[(h % d as u64) as usize] += sign;
        }
        if self.config.normalization == Normalization::UnitL2 {
            normalize(&mut values);
        }
        Ok(EmbeddingVector(values))
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

/// Client for `POST {"texts": [...]}` → `{"vectors": [[...], ...]}`.
pub struct RemoteEmbedder {
    config: EmbedderConfig,
    endpoint: String,
    http: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    pub fn new(config: EmbedderConfig, deadline: Duration) -> Result<Self, EmbeddingError> {
        config.validate()?;
        let endpoint = config
            .endpoint
            .clone()
            .ok_or_else(|| EmbeddingError::InvalidConfig("missing endpoint".into()))?;
        let http = reqwest::blocking::Client::builder()
            .timeout(deadline)
            .build()
            .map_err(|e| EmbeddingError::RemoteUnavailable(e.to_string()))?;
        Ok(Self { config, endpoint, http })
    }
}

impl Embedder for RemoteEmbedder {
    fn config(&self) -> &EmbedderConfig {
        &self.config
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        let mut out = self.embed_batch(&[text])?;
        Ok(out.remove(0))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbeddingError> {
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::EmptyText);
        }
        let resp = self
            .http
            .post(&self.endpoint)
            .json(&EmbedRequest { texts })
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| EmbeddingError::RemoteUnavailable(e.to_string()))?;
        let body: EmbedResponse =
            resp.json().map_err(|e| EmbeddingError::RemoteUnavailable(e.to_string()))?;
        if body.vectors.len() != texts.len() {
            return Err(EmbeddingError::RemoteUnavailable(format!(
                "expected {} vectors, got {}",
                texts.len(),
                body.vectors.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|mut v| {
                if v.len() != self.config.dimension {
                    return Err(EmbeddingError::DimensionMismatch {
                        expected: self.config.dimension,
                        actual: v.len(),
                    });
                }
                if self.config.normalization == Normalization::UnitL2 {
                    normalize(&mut v);
                }
                EmbeddingVector::new(v)
            })
            .collect()
    }
}

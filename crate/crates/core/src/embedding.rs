//! Text embeddings and cosine similarity.
//!
//! Every stored [`Embedding`] is L2-normalized (or all-zero, flagged
//! degenerate), so similarity between stored vectors reduces to a dot
//! product. Two embedders are provided: a seeded hashed bag-of-tokens
//! embedder for reproducible runs without model weights, and a client for a
//! remote embedding service.

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::http::{JsonClient, TransportError};
use crate::text;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EmbeddingError {
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("cosine is undefined for a degenerate (all-zero) vector")]
    Degenerate,
    #[error("embedding contains a non-finite value at index {index}")]
    NonFinite { index: usize },
    #[error("invalid embedder config: {0}")]
    Config(String),
    #[error("text #{index} is empty after trimming")]
    EmptyText { index: usize },
    #[error("embed_batch called with no texts")]
    EmptyBatch,
    #[error("remote embedder returned {actual} vectors for {expected} texts")]
    CountMismatch { expected: usize, actual: usize },
    #[error(transparent)]
    Transport(#[from] TransportError),
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

/// An L2-normalized embedding vector, or the all-zero degenerate vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    values: Vec<f32>,
    norm: f64,
    degenerate: bool,
}

impl Embedding {
    /// Normalize `raw` and wrap it. An all-zero input yields the degenerate vector.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if let Some(index) = raw.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { index });
        }
        if raw.is_empty() {
            return Err(EmbeddingError::Config("embedding must have dim >= 1".into()));
        }
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Ok(Self::zero(raw.len()));
        }
        Ok(Self::with_norm(raw.iter().map(|v| (v / norm) as f32).collect()))
    }

    /// Wrap already-stored values without renormalizing (bit-exact reload).
    pub fn from_stored(values: Vec<f32>) -> Result<Self> {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbeddingError::NonFinite { index });
        }
        Ok(Self::with_norm(values))
    }

    fn with_norm(values: Vec<f32>) -> Self {
        let norm = values
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt();
        Self {
            degenerate: values.iter().all(|v| *v == 0.0),
            values,
            norm,
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self {
            values: vec![0.0; dim],
            norm: 0.0,
            degenerate: true,
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn norm(&self) -> f64 {
        self.norm
    }
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(EmbeddingError::DimMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    if a.is_degenerate() || b.is_degenerate() {
        return Err(EmbeddingError::Degenerate);
    }
    let dot: f64 = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum();
    let denom = a.norm() * b.norm();
    if denom == 0.0 {
        return Err(EmbeddingError::Degenerate);
    }
    Ok((dot / denom).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedderKind {
    DeterministicHash,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_in_flight() -> usize {
    4
}

fn default_retries() -> u32 {
    2
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            kind: EmbedderKind::DeterministicHash,
            dim: 256,
            endpoint: None,
            seed: 0,
            max_in_flight: default_in_flight(),
            retries: default_retries(),
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(EmbeddingError::Config("dim must be positive".into()));
        }
        match self.kind {
            EmbedderKind::DeterministicHash if self.dim < 8 => Err(EmbeddingError::Config(
                "deterministic-hash embedder requires dim >= 8".into(),
            )),
            EmbedderKind::Remote if self.endpoint.as_deref().is_none_or(str::is_empty) => Err(
                EmbeddingError::Config("remote embedder requires an endpoint".into()),
            ),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        self.validate()?;
        Ok(match self.kind {
            EmbedderKind::DeterministicHash => Box::new(HashEmbedder::new(self.dim, self.seed)?),
            EmbedderKind::Remote => Box::new(RemoteEmbedder::new(
                self.endpoint.as_deref().unwrap_or_default(),
                self.dim,
                self.retries,
                self.max_in_flight,
            )),
        })
    }
}

/// Text-to-vector embedder. Implementations are stateless after construction.
pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Embed raw texts without the non-empty precondition; texts with no
    /// tokens yield degenerate vectors.
    fn embed_unchecked(&self, texts: &[&str]) -> Result<Vec<Embedding>>;

    /// Embed a non-empty batch of non-blank texts, one vector per input.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        if texts.is_empty() {
            return Err(EmbeddingError::EmptyBatch);
        }
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbeddingError::EmptyText { index });
        }
        let out = self.embed_unchecked(texts)?;
        if out.len() != texts.len() {
            return Err(EmbeddingError::CountMismatch {
                expected: texts.len(),
                actual: out.len(),
            });
        }
        for v in &out {
            if v.dim() != self.dim() {
                return Err(EmbeddingError::DimMismatch {
                    expected: self.dim(),
                    actual: v.dim(),
                });
            }
        }
        Ok(out)
    }

    fn embed(&self, text: &str) -> Result<Embedding> {
        Ok(self.embed_batch(&[text])?.remove(0))
    }
}

/// Hashed bag-of-tokens embedder: each lowercased token is hashed with a
/// seeded xxh3 into one of `dim` buckets, counts are L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(EmbeddingError::Config(
                "deterministic-hash embedder requires dim >= 8".into(),
            ));
        }
        Ok(Self { dim, seed })
    }

    pub fn embed_text(&self, text: &str) -> Embedding {
        let mut counts = vec![0.0f64; self.dim];
        for tok in text::tokenize(text) {
            let bucket = xxh3_64_with_seed(tok.as_bytes(), self.seed) % self.dim as u64;
            counts[bucket as usize] += 1.0;
        }
        Embedding::from_raw(&counts).expect("bucket counts are finite")
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_unchecked(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        Ok(texts.iter().map(|t| self.embed_text(t)).collect())
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

/// Client for `POST {endpoint}/embed`.
#[derive(Debug)]
pub struct RemoteEmbedder {
    client: JsonClient,
    dim: usize,
}

impl RemoteEmbedder {
    pub fn new(endpoint: &str, dim: usize, retries: u32, max_in_flight: usize) -> Self {
        Self {
            client: JsonClient::new(endpoint, retries, max_in_flight),
            dim,
        }
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_unchecked(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        let resp: EmbedResponse = self.client.post("embed", &EmbedRequest { texts })?;
        if resp.dim != self.dim {
            return Err(EmbeddingError::DimMismatch {
                expected: self.dim,
                actual: resp.dim,
            });
        }
        resp.vectors
            .iter()
            .map(|v| {
                if v.len() != self.dim {
                    return Err(EmbeddingError::DimMismatch {
                        expected: self.dim,
                        actual: v.len(),
                    });
                }
                Embedding::from_raw(v)
            })
            .collect()
    }
}

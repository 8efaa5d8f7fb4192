//! Fact text → unit vector.
//!
//! Two backends share one contract: a remote OpenAI-compatible
//! `/embeddings` endpoint and a deterministic offline hash embedder. Text is
//! normalized identically before either sees it, and every returned vector
//! is L2-normalized here regardless of what the backend produced.

mod cache;
mod offline;
mod remote;
mod store;

use std::collections::HashMap;

use thiserror::Error;

use crate::types::AtomicFact;

pub use cache::{CachedEmbedder, EmbeddingCache};
pub use offline::OfflineHashEmbedder;
pub use remote::{RemoteEmbedder, RemoteEmbedderConfig};
pub use store::{read_embeddings, write_embeddings, StoreError};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("embedding endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("embedding endpoint returned {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed embedding response: {0}")]
    BadResponse(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("zero vector returned for {0:?}")]
    ZeroVector(String),
    #[error("fact {0} is excluded and cannot be embedded")]
    ExcludedFact(String),
    #[error("embedding cache: {0}")]
    Cache(#[from] std::io::Error),
}

/// A fact's unit-norm embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct FactEmbedding {
    pub fact_id: String,
    pub vector: Vec<f32>,
}

impl FactEmbedding {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// A text embedding backend. Implementations may return unnormalized vectors.
pub trait Embedder: Sync {
    /// Identifies the backend and model; part of the cache key.
    fn backend_id(&self) -> String;

    /// Embeds already-normalized texts, one vector per input, in order.
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError>;
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        (**self).embed_texts(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for Box<E> {
    fn backend_id(&self) -> String {
        (**self).backend_id()
    }
    fn embed_texts(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, EmbedError> {
        (**self).embed_texts(texts)
    }
}

/// Lowercase, collapse whitespace, strip trailing punctuation.
pub fn normalize_for_embedding(text: &str) -> String {
    let collapsed = text
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    collapsed
        .trim_end_matches(|c: char| {
            matches!(
                c,
                '.' | '!' | '?' | ',' | ';' | ':' | '\u{2026}' | '"' | '\'' | '\u{201d}' | '\u{2019}'
            ) || c.is_whitespace()
        })
        .to_string()
}

/// Scales `v` to unit L2 norm in place.
pub fn l2_normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return false;
    }
    for x in v.iter_mut() {
        *x /= norm;
    }
    true
}

/// Embeds non-excluded facts. Equal normalized texts are embedded once and
/// share a vector.
pub fn embed_facts<E: Embedder + ?Sized>(
    facts: &[AtomicFact],
    embedder: &E,
) -> Result<Vec<FactEmbedding>, EmbedError> {
    if let Some(f) = facts.iter().find(|f| f.excluded) {
        return Err(EmbedError::ExcludedFact(f.fact_id.clone()));
    }
    let normalized: Vec<String> = facts
        .iter()
        .map(|f| normalize_for_embedding(&f.text))
        .collect();
    let mut unique: Vec<String> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for t in &normalized {
        if !slot.contains_key(t.as_str()) {
            slot.insert(t.as_str(), unique.len());
            unique.push(t.clone());
        }
    }
    if unique.is_empty() {
        return Ok(Vec::new());
    }
    let raw = embedder.embed_texts(&unique)?;
    if raw.len() != unique.len() {
        return Err(EmbedError::BadResponse(format!(
            "expected {} vectors, got {}",
            unique.len(),
            raw.len()
        )));
    }
    let dim = raw[0].len();
    let mut vectors = Vec::with_capacity(raw.len());
    for (mut v, text) in raw.into_iter().zip(&unique) {
        if v.len() != dim {
            return Err(EmbedError::DimMismatch {
                expected: dim,
                got: v.len(),
            });
        }
        if !l2_normalize(&mut v) {
            return Err(EmbedError::ZeroVector(text.clone()));
        }
        vectors.push(v.into_iter().map(|x| x as f32).collect::<Vec<f32>>());
    }
    Ok(facts
        .iter()
        .zip(&normalized)
        .map(|(f, t)| FactEmbedding {
            fact_id: f.fact_id.clone(),
            vector: vectors[slot[t.as_str()]].clone(),
        })
        .collect())
}

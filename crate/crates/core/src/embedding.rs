//! Embedding providers and query-embedding construction (direct or HyDE).

use std::ops::Deref;
use std::sync::{Arc, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::generation::{generate, GenParams, LlmBackend, RetryPolicy};
use crate::net::{self, InFlightLimit, NetError, OutboundGate};

/// Texts per provider call.
pub const BATCH_SIZE: usize = 64;

pub const DEFAULT_HYDE_TEMPLATE: &str =
    "Write a short factual passage that answers the following question.\n\nQuestion: {q}\n\nPassage:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl Deref for Embedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Embedding {
    fn from(v: Vec<f64>) -> Self {
        Embedding(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedChunk {
    pub chunk: crate::corpus::Chunk,
    pub vector: Embedding,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryEmbeddingMode {
    #[default]
    Direct,
    Hyde,
}

#[derive(Debug, thiserror::Error)]
pub enum EmbeddingError {
    #[error("input text {0} is empty")]
    EmptyText(usize),
    #[error("embedding dimension mismatch at input {index}: expected {expected}, got {got}")]
    DimensionMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("embedding at input {0} has non-finite entries")]
    NonFinite(usize),
    #[error("provider returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("embedding provider is disabled")]
    Disabled,
    #[error(transparent)]
    Net(#[from] NetError),
}

impl EmbeddingError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbeddingError::Net(e) if e.is_retryable())
    }
}

pub trait EmbeddingProvider: Send + Sync {
    /// One call's worth of texts; callers go through [`embed_texts`].
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError>;

    /// Output dimension when known without a call.
    fn dimension(&self) -> Option<usize>;

    fn name(&self) -> &'static str;
}

pub type SharedEmbedder = Arc<dyn EmbeddingProvider>;

/// Embeds `texts` in order, batching and checking that every vector shares
/// one finite dimension.
pub fn embed_texts<S: AsRef<str>>(
    provider: &dyn EmbeddingProvider,
    texts: &[S],
) -> Result<Vec<Embedding>, EmbeddingError> {
    if let Some(i) = texts.iter().position(|t| t.as_ref().trim().is_empty()) {
        return Err(EmbeddingError::EmptyText(i));
    }
    let mut out = Vec::with_capacity(texts.len());
    for batch in texts.chunks(BATCH_SIZE) {
        let refs: Vec<&str> = batch.iter().map(AsRef::as_ref).collect();
        let vectors = provider.embed_batch(&refs)?;
        if vectors.len() != refs.len() {
            return Err(EmbeddingError::CountMismatch {
                expected: refs.len(),
                got: vectors.len(),
            });
        }
        out.extend(vectors);
    }
    let expected = provider
        .dimension()
        .or_else(|| out.first().map(Embedding::dim));
    for (index, v) in out.iter().enumerate() {
        if Some(v.dim()) != expected {
            return Err(EmbeddingError::DimensionMismatch {
                index,
                expected: expected.unwrap_or(0),
                got: v.dim(),
            });
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::NonFinite(index));
        }
    }
    Ok(out)
}

/// Feature-hashing bag of words: each lowercased, punctuation-trimmed
/// whitespace token is hashed (FNV-1a) into one of `dim` buckets, counts are
/// scaled by `ln(1 + c)` and the vector is L2-normalized.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn embed_one(&self, text: &str) -> Embedding {
        let mut counts = vec![0u32; self.dim];
        for token in text.split_whitespace() {
            let token = token
                .trim_matches(|c: char| c.is_ascii_punctuation())
                .to_lowercase();
            if token.is_empty() {
                continue;
            }
            counts[(fnv1a(token.as_bytes()) % self.dim as u64) as usize] += 1;
        }
        let mut v: Vec<f64> = counts.iter().map(|&c| f64::from(c).ln_1p()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Embedding(v)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl EmbeddingProvider for HashingEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }

    fn dimension(&self) -> Option<usize> {
        Some(self.dim)
    }

    fn name(&self) -> &'static str {
        "hashing"
    }
}

/// Rejects every call.
#[derive(Debug, Default, Clone, Copy)]
pub struct NullEmbedder;

impl EmbeddingProvider for NullEmbedder {
    fn embed_batch(&self, _texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        Err(EmbeddingError::Disabled)
    }

    fn dimension(&self) -> Option<usize> {
        None
    }

    fn name(&self) -> &'static str {
        "null"
    }
}

/// Client for `POST {base_url}/embeddings` with `{model, input}` requests.
pub struct HttpEmbedder {
    url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    gate: Arc<OutboundGate>,
    limit: InFlightLimit,
    dim: OnceLock<usize>,
}

impl HttpEmbedder {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key_env: Option<&str>,
        timeout: Duration,
        max_in_flight: usize,
        gate: Arc<OutboundGate>,
    ) -> Self {
        Self {
            url: net::join_url(base_url, "embeddings"),
            model: model.to_string(),
            api_key: net::api_key_from_env(api_key_env),
            client: net::client(timeout),
            gate,
            limit: InFlightLimit::new(max_in_flight),
            dim: OnceLock::new(),
        }
    }

    pub fn request_body(model: &str, texts: &[&str]) -> serde_json::Value {
        serde_json::json!({ "model": model, "input": texts })
    }
}

#[derive(Deserialize)]
struct EmbeddingsResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f64>,
    #[serde(default)]
    index: Option<usize>,
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
        let body = Self::request_body(&self.model, texts);
        let reply = {
            let _permit = self.limit.acquire();
            net::post_json(&self.gate, &self.client, &self.url, self.api_key.as_deref(), &body)?
        };
        let mut parsed: EmbeddingsResponse =
            serde_json::from_value(reply).map_err(|e| NetError::Decode {
                url: self.url.clone(),
                message: e.to_string(),
            })?;
        if parsed.data.iter().all(|d| d.index.is_some()) {
            parsed.data.sort_by_key(|d| d.index);
        }
        let vectors: Vec<Embedding> = parsed.data.into_iter().map(|d| Embedding(d.embedding)).collect();
        if let Some(first) = vectors.first() {
            let d = *self.dim.get_or_init(|| first.dim());
            if let Some((index, v)) = vectors.iter().enumerate().find(|(_, v)| v.dim() != d) {
                return Err(EmbeddingError::DimensionMismatch {
                    index,
                    expected: d,
                    got: v.dim(),
                });
            }
        }
        Ok(vectors)
    }

    fn dimension(&self) -> Option<usize> {
        self.dim.get().copied()
    }

    fn name(&self) -> &'static str {
        "http"
    }
}

/// Generator settings for the HyDE transform.
pub struct Hyde<'a> {
    pub backend: &'a dyn LlmBackend,
    pub template: &'a str,
    pub params: GenParams,
    pub retry: RetryPolicy,
}

/// Asks the generator for a hypothetical passage answering `question`.
pub fn hyde_expand(question: &str, hyde: &Hyde<'_>) -> Result<String, crate::generation::GenerationError> {
    let prompt = hyde.template.replace("{q}", question);
    let out = generate(hyde.backend, &prompt, &hyde.params, &hyde.retry)?;
    let passage = out.text.trim().to_string();
    if passage.is_empty() {
        return Err(crate::generation::GenerationError::EmptyCompletion);
    }
    Ok(passage)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEmbedding {
    pub vector: Embedding,
    /// Mode actually used; HyDE falls back to direct on generator failure.
    pub mode: QueryEmbeddingMode,
    pub hyde_passage: Option<String>,
    pub warnings: Vec<String>,
}

/// Direct mode embeds `question`; HyDE mode embeds the generated passage,
/// falling back to direct with a warning when the generator fails.
pub fn query_embedding(
    question: &str,
    mode: QueryEmbeddingMode,
    provider: &dyn EmbeddingProvider,
    hyde: Option<&Hyde<'_>>,
) -> Result<QueryEmbedding, EmbeddingError> {
    let mut warnings = Vec::new();
    if mode == QueryEmbeddingMode::Hyde {
        match hyde.map(|h| hyde_expand(question, h)) {
            Some(Ok(passage)) => {
                let vector = embed_texts(provider, &[passage.as_str()])?.remove(0);
                return Ok(QueryEmbedding {
                    vector,
                    mode,
                    hyde_passage: Some(passage),
                    warnings,
                });
            }
            Some(Err(e)) => {
                tracing::warn!(error = %e, "HyDE generation failed; using the direct query embedding");
                warnings.push(format!("hyde fallback to direct: {e}"));
            }
            None => warnings.push("hyde fallback to direct: no generator configured".to_string()),
        }
    }
    let vector = embed_texts(provider, &[question])?.remove(0);
    Ok(QueryEmbedding {
        vector,
        mode: QueryEmbeddingMode::Direct,
        hyde_passage: None,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generation::MockBackend;

    #[test]
    fn hashing_is_deterministic_and_unit_norm() {
        let e = HashingEmbedder::new(64);
        let a = e.embed_one("Pulsars are rotating neutron stars.");
        let b = e.embed_one("Pulsars are rotating neutron stars.");
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-9);
        assert_eq!(a.dim(), 64);
    }

    #[test]
    fn batch_preserves_order() {
        let e = HashingEmbedder::new(16);
        let texts = ["alpha", "beta gamma", "delta"];
        let out = embed_texts(&e, &texts).unwrap();
        assert_eq!(out.len(), 3);
        for (t, v) in texts.iter().zip(&out) {
            assert_eq!(*v, e.embed_one(t));
        }
    }

    #[test]
    fn batches_larger_than_one_call() {
        let e = HashingEmbedder::new(8);
        let texts: Vec<String> = (0..150).map(|i| format!("text number {i}")).collect();
        assert_eq!(embed_texts(&e, &texts).unwrap().len(), 150);
    }

    #[test]
    fn rejects_empty_text_before_dispatch() {
        assert!(matches!(
            embed_texts(&NullEmbedder, &["ok", " "]),
            Err(EmbeddingError::EmptyText(1))
        ));
        assert!(matches!(embed_texts(&NullEmbedder, &["ok"]), Err(EmbeddingError::Disabled)));
    }

    struct Ragged;
    impl EmbeddingProvider for Ragged {
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>, EmbeddingError> {
            Ok(texts.iter().enumerate().map(|(i, _)| Embedding(vec![1.0; 2 + i])).collect())
        }
        fn dimension(&self) -> Option<usize> {
            None
        }
        fn name(&self) -> &'static str {
            "ragged"
        }
    }

    #[test]
    fn ragged_batch_is_fatal() {
        assert!(matches!(
            embed_texts(&Ragged, &["a", "b"]),
            Err(EmbeddingError::DimensionMismatch { index: 1, expected: 2, got: 3 })
        ));
    }

    fn hyde<'a>(backend: &'a MockBackend) -> Hyde<'a> {
        Hyde {
            backend,
            template: DEFAULT_HYDE_TEMPLATE,
            params: GenParams::default(),
            retry: RetryPolicy::none(),
        }
    }

    #[test]
    fn hyde_passes_generator_output_through() {
        let backend = MockBackend::fixed("P");
        assert_eq!(hyde_expand("What is a pulsar?", &hyde(&backend)).unwrap(), "P");
        let prompt = &backend.requests()[0].prompt;
        assert!(prompt.ends_with("Question: What is a pulsar?\n\nPassage:"));
    }

    #[test]
    fn query_embedding_modes() {
        let e = HashingEmbedder::new(64);
        let q = "What is a pulsar?";
        let direct = query_embedding(q, QueryEmbeddingMode::Direct, &e, None).unwrap();
        assert_eq!(direct.vector, embed_texts(&e, &[q]).unwrap()[0]);

        let backend = MockBackend::fixed("P");
        let h = query_embedding(q, QueryEmbeddingMode::Hyde, &e, Some(&hyde(&backend))).unwrap();
        assert_eq!(h.vector, embed_texts(&e, &["P"]).unwrap()[0]);
        assert_eq!(h.hyde_passage.as_deref(), Some("P"));

        let down = MockBackend::unreachable();
        let fb = query_embedding(q, QueryEmbeddingMode::Hyde, &e, Some(&hyde(&down))).unwrap();
        assert_eq!(fb.vector, direct.vector);
        assert_eq!(fb.mode, QueryEmbeddingMode::Direct);
        assert_eq!(fb.warnings.len(), 1);
    }
}

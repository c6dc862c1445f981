//! Cross-modal embeddings for the grounding reward.
//!
//! [`MockEmbedder`] derives vectors from label hashes and ground-truth content
//! tags, so tests get a controllable stand-in for a CLIP-style model.
//! [`RemoteEmbedder`] speaks the `/info` + `/embed` wire contract.

use std::collections::HashMap;
use std::sync::Mutex;

use base64::Engine as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::http::{JsonTransport, RetryPolicy, Semaphore, TransportError};
use crate::zoom::ImageRecord;

pub const DEFAULT_MOCK_DIM: usize = 64;
pub const DEFAULT_MOCK_NOISE: f64 = 0.1;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EmbedError {
    #[error("label is empty")]
    EmptyLabel,
    #[error("embedding service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("bad embedding response: {0}")]
    BadResponse(String),
}

impl From<TransportError> for EmbedError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Unavailable(m) => EmbedError::ServiceUnavailable(m),
            other => EmbedError::BadResponse(other.to_string()),
        }
    }
}

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::BadResponse("empty vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::BadResponse("non-finite component".into()));
        }
        Ok(Embedding(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, label: &str) -> Result<Embedding, EmbedError>;
    fn embed_image(&self, crop: &ImageRecord) -> Result<Embedding, EmbedError>;
}

/// Deterministic, annotation-driven embedder.
///
/// Each label (trimmed, lowercased) maps to a seeded pseudo-random unit
/// vector. An image embeds as the vector of its dominant content tag plus a
/// noise component of norm `noise` orthogonal to it, renormalized; so the
/// cosine against the matching label is exactly `1 / sqrt(1 + noise^2)`.
/// Untagged images embed as a seeded background vector plus the same noise.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    seed: u64,
    dim: usize,
    noise: f64,
}

impl MockEmbedder {
    pub fn new(seed: u64) -> Self {
        MockEmbedder { seed, dim: DEFAULT_MOCK_DIM, noise: DEFAULT_MOCK_NOISE }
    }

    pub fn with_dim(mut self, dim: usize) -> Self {
        self.dim = dim.max(2);
        self
    }

    pub fn with_noise(mut self, noise: f64) -> Self {
        self.noise = noise.abs();
        self
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    fn rng_for(&self, domain: &[u8], data: &[u8]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(domain);
        h.update([0]);
        h.update(self.seed.to_le_bytes());
        h.update(data);
        let digest: [u8; 32] = h.finalize().into();
        ChaCha8Rng::from_seed(digest)
    }

    fn gaussian(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        loop {
            let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(rng)).collect();
            if norm(&v) > 1e-6 {
                return v;
            }
        }
    }

    fn label_vector(&self, key: &str) -> Vec<f64> {
        let mut rng = self.rng_for(b"label", key.as_bytes());
        normalized(self.gaussian(&mut rng))
    }

    fn background_vector(&self) -> Vec<f64> {
        let mut rng = self.rng_for(b"background", &[]);
        normalized(self.gaussian(&mut rng))
    }

    fn content_digest(crop: &ImageRecord) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(crop.width().to_le_bytes());
        h.update(crop.height().to_le_bytes());
        h.update(crop.pixels());
        h.update(serde_json::to_vec(crop.content_tags()).expect("tags serialize"));
        let digest: [u8; 32] = h.finalize().into();
        digest.to_vec()
    }
}

fn label_key(label: &str) -> Result<String, EmbedError> {
    let key = label.trim();
    if key.is_empty() {
        return Err(EmbedError::EmptyLabel);
    }
    Ok(key.to_lowercase())
}

impl EmbeddingProvider for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, label: &str) -> Result<Embedding, EmbedError> {
        Embedding::new(self.label_vector(&label_key(label)?))
    }

    fn embed_image(&self, crop: &ImageRecord) -> Result<Embedding, EmbedError> {
        let base = match crop.dominant_tag() {
            Some(tag) => self.label_vector(&label_key(&tag.label)?),
            None => self.background_vector(),
        };
        let mut rng = self.rng_for(b"noise", &Self::content_digest(crop));
        let mut noise = self.gaussian(&mut rng);
        let along = dot(&noise, &base);
        noise.iter_mut().zip(&base).for_each(|(n, b)| *n -= along * b);
        let noise = normalized(noise);
        let mixed = base.iter().zip(&noise).map(|(b, n)| b + self.noise * n).collect();
        Embedding::new(normalized(mixed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Kind {
    Text,
    Image,
}

impl Kind {
    fn as_str(self) -> &'static str {
        match self {
            Kind::Text => "text",
            Kind::Image => "image",
        }
    }
}

/// Client for a remote embedding service.
///
/// Requests are bounded in flight, retried on transient failures and memoized
/// per `(kind, payload hash)` for the lifetime of the client.
pub struct RemoteEmbedder {
    transport: Box<dyn JsonTransport>,
    dim: usize,
    retry: RetryPolicy,
    in_flight: Semaphore,
    memo: Mutex<HashMap<(Kind, [u8; 32]), Embedding>>,
}

impl RemoteEmbedder {
    /// Performs the `/info` handshake to learn the vector dimension.
    pub fn connect(transport: Box<dyn JsonTransport>, retry: RetryPolicy) -> Result<Self, EmbedError> {
        let info = retry.run(|| transport.get("/info"))?;
        let dim = info
            .get("dim")
            .and_then(Value::as_u64)
            .filter(|d| *d > 0)
            .ok_or_else(|| EmbedError::BadResponse(format!("handshake without a positive dim: {info}")))?;
        Ok(RemoteEmbedder {
            transport,
            dim: dim as usize,
            retry,
            in_flight: Semaphore::new(DEFAULT_MAX_IN_FLIGHT),
            memo: Mutex::default(),
        })
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.in_flight = Semaphore::new(n);
        self
    }

    fn embed(&self, kind: Kind, payload: Value) -> Result<Embedding, EmbedError> {
        let request = json!({ "kind": kind.as_str(), "payload": payload });
        let digest: [u8; 32] = Sha256::digest(request.to_string().as_bytes()).into();
        if let Some(hit) = self.memo.lock().unwrap().get(&(kind, digest)) {
            return Ok(hit.clone());
        }
        let response = {
            let _permit = self.in_flight.acquire();
            self.retry.run(|| self.transport.post("/embed", &request))?
        };
        let vector: Vec<f64> = response
            .get("vector")
            .and_then(Value::as_array)
            .ok_or_else(|| EmbedError::BadResponse(format!("no vector in {response}")))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| EmbedError::BadResponse(format!("non-numeric component {v}"))))
            .collect::<Result<_, _>>()?;
        if vector.len() != self.dim {
            return Err(EmbedError::BadResponse(format!("expected {} components, got {}", self.dim, vector.len())));
        }
        let embedding = Embedding::new(vector)?;
        self.memo.lock().unwrap().insert((kind, digest), embedding.clone());
        Ok(embedding)
    }
}

/// Wire payload for an image: dimensions plus base64 of the raw raster.
pub fn image_payload(crop: &ImageRecord) -> Value {
    json!({
        "width": crop.width(),
        "height": crop.height(),
        "data": base64::engine::general_purpose::STANDARD.encode(crop.pixels()),
    })
}

impl EmbeddingProvider for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, label: &str) -> Result<Embedding, EmbedError> {
        if label.trim().is_empty() {
            return Err(EmbedError::EmptyLabel);
        }
        self.embed(Kind::Text, Value::String(label.to_string()))
    }

    fn embed_image(&self, crop: &ImageRecord) -> Result<Embedding, EmbedError> {
        self.embed(Kind::Image, image_payload(crop))
    }
}

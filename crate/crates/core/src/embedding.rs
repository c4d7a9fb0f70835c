//! Text embeddings behind a small port, plus the vector math the sampler
//! and retriever need.
//!
//! Every [`Embedder`] returns unit-norm vectors, so cosine similarity of two
//! port outputs reduces to a dot product.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const NORM_TOLERANCE: f64 = 1e-6;

/// Default request batch for [`RemoteEmbedder`].
pub const DEFAULT_REMOTE_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateVector("non-finite component"));
        }
        Ok(Embedding(values))
    }

    /// The `index`-th standard basis vector of dimension `dim`.
    pub fn basis(dim: usize, index: usize) -> Self {
        let mut v = vec![0.0; dim];
        v[index] = 1.0;
        Embedding(v)
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateVector("zero norm"));
        }
        Ok(Embedding(self.0.iter().map(|x| x / n).collect()))
    }

    pub fn is_unit(&self) -> bool {
        (self.norm() - 1.0).abs() <= NORM_TOLERANCE
    }

    pub fn dot(&self, other: &Embedding) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }
}

fn check_dims(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity, clamped into `[-1, 1]`.
pub fn cosine(u: &Embedding, v: &Embedding) -> Result<f64> {
    check_dims(u.dim(), v.dim())?;
    let nu = u.norm();
    let nv = v.norm();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector("zero norm in cosine"));
    }
    Ok((dot(&u.0, &v.0) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Source of unit-norm text embeddings.
pub trait Embedder: Send + Sync {
    fn dimension(&self) -> usize;

    /// Embeds `texts` in order; one vector per input.
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>>;

    fn embed(&self, text: &str) -> Result<Embedding> {
        let mut out = self.embed_batch(&[text])?;
        out.pop().ok_or(Error::EmbeddingService("empty response".into()))
    }
}

impl<E: Embedder + ?Sized> Embedder for Arc<E> {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        (**self).embed_batch(texts)
    }
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        (**self).embed_batch(texts)
    }
}

/// Lowercased alphanumeric runs; everything else separates tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase)
}

// FNV-1a, spelled out so token seeds are stable across toolchains.
fn fnv1a(seed: u64, bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Bag-of-tokens embedder with seeded pseudo-random token directions.
///
/// Needs no model files and gives identical vectors on every platform for a
/// given `(dimension, seed)`.
#[derive(Debug)]
pub struct HashEmbedder {
    dimension: usize,
    seed: u64,
    cache: Mutex<HashMap<String, Arc<[f64]>>>,
}

impl HashEmbedder {
    pub const MIN_DIMENSION: usize = 8;

    pub fn new(dimension: usize, seed: u64) -> Result<Self> {
        if dimension < Self::MIN_DIMENSION {
            return Err(Error::Domain(format!(
                "embedding dimension must be at least {}, got {dimension}",
                Self::MIN_DIMENSION
            )));
        }
        Ok(HashEmbedder { dimension, seed, cache: Mutex::new(HashMap::new()) })
    }

    fn token_direction(&self, token: &str) -> Arc<[f64]> {
        if let Some(v) = self.cache.lock().expect("embedder cache poisoned").get(token) {
            return Arc::clone(v);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, token.as_bytes()));
        let mut v: Vec<f64> = (0..self.dimension).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = dot(&v, &v).sqrt();
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
        let v: Arc<[f64]> = v.into();
        self.cache.lock().expect("embedder cache poisoned").insert(token.to_owned(), Arc::clone(&v));
        v
    }

    fn embed_one(&self, text: &str) -> Embedding {
        let mut sum = vec![0.0; self.dimension];
        for token in tokenize(text) {
            let dir = self.token_direction(&token);
            sum.iter_mut().zip(dir.iter()).for_each(|(s, d)| *s += d);
        }
        Embedding(sum).normalized().unwrap_or_else(|_| Embedding::basis(self.dimension, 0))
    }
}

impl Embedder for HashEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        Ok(texts.iter().map(|t| self.embed_one(t)).collect())
    }
}

/// Request body of the embedding sidecar's `POST /embed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub texts: Vec<String>,
}

/// Response body of the embedding sidecar's `POST /embed`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub vectors: Vec<Vec<f64>>,
    pub model: String,
    pub dimension: usize,
}

/// Client for an HTTP embedding sidecar.
pub struct RemoteEmbedder {
    url: String,
    dimension: usize,
    batch_size: usize,
    agent: ureq::Agent,
}

impl RemoteEmbedder {
    pub fn new(endpoint: &str, dimension: usize, timeout: Duration) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(timeout).build();
        RemoteEmbedder {
            url: format!("{}/embed", endpoint.trim_end_matches('/')),
            dimension,
            batch_size: DEFAULT_REMOTE_BATCH,
            agent,
        }
    }

    pub fn with_batch_size(mut self, batch_size: usize) -> Self {
        self.batch_size = batch_size.max(1);
        self
    }

    fn request(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        let body = EmbedRequest { texts: texts.iter().map(|t| (*t).to_owned()).collect() };
        let response = self.agent.post(&self.url).send_json(&body).map_err(|e| match e {
            ureq::Error::Status(code, _) => Error::EmbeddingService(format!("HTTP {code} from {}", self.url)),
            other => Error::EmbeddingService(other.to_string()),
        })?;
        let parsed: EmbedResponse =
            response.into_json().map_err(|e| Error::EmbeddingService(format!("malformed response: {e}")))?;
        if parsed.vectors.len() != texts.len() {
            return Err(Error::EmbeddingService(format!(
                "sent {} texts, received {} vectors",
                texts.len(),
                parsed.vectors.len()
            )));
        }
        parsed
            .vectors
            .into_iter()
            .map(|v| {
                check_dims(self.dimension, v.len())?;
                Embedding::new(v)?.normalized()
            })
            .collect()
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Embedding>> {
        let mut out = Vec::with_capacity(texts.len());
        for chunk in texts.chunks(self.batch_size) {
            out.extend(self.request(chunk)?);
        }
        Ok(out)
    }
}

//! Embedding providers and a content-addressed embedding cache.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::clock::{retry, Clock, RetryPolicy};
use crate::error::{Error, FailureKind, ProviderError, Result};
use crate::model::EmbeddingVector;
use crate::text::FieldHasher;

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn model(&self) -> &str;
    /// One vector per input text, in order. Need not be normalized.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError>;
}

impl<E: Embedder + ?Sized> Embedder for std::sync::Arc<E> {
    fn name(&self) -> &str {
        (**self).name()
    }
    fn model(&self) -> &str {
        (**self).model()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        (**self).embed(texts)
    }
}

/// Offline embedder: each lowercase word maps to a seeded pseudo-random
/// direction, and a text is the sum of its word directions.
///
/// Texts with the same words get the same vector; texts sharing most words
/// get high cosine similarity.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
    model: String,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed, model: format!("seeded-token-projection-d{dim}-s{seed}") }
    }

    fn direction(&self, token: &str) -> Vec<f64> {
        let digest = FieldHasher::new("hash-embedder")
            .field(&self.seed.to_string())
            .field(token)
            .finish();
        let mut seed = [0u8; 32];
        hex::decode_to_slice(&digest, &mut seed).expect("sha256 hex");
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let lower = text.to_lowercase();
        let mut tokens: Vec<&str> = lower
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            tokens.push(&lower);
        }
        let mut out = vec![0.0; self.dim];
        for t in tokens {
            for (o, d) in out.iter_mut().zip(self.direction(t)) {
                *o += d;
            }
        }
        out
    }
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        "hash"
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// JSON-over-HTTP: `{model, input: [texts]}` answering `{vectors: [[...]]}`.
pub struct HttpEmbedder {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(endpoint: &str, model: &str, api_key_env: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.to_string(),
            model: model.to_string(),
            api_key: std::env::var(api_key_env).ok().filter(|k| !k.is_empty()),
            agent,
        }
    }

    /// Reads `vectors`, or the `data[].embedding` envelope.
    pub fn parse_vectors(body: &Value) -> Result<Vec<Vec<f64>>, ProviderError> {
        let bad = |e: serde_json::Error| ProviderError::fatal(format!("bad vectors: {e}"));
        if let Some(v) = body.get("vectors") {
            return serde_json::from_value(v.clone()).map_err(bad);
        }
        if let Some(Value::Array(data)) = body.get("data") {
            return data
                .iter()
                .map(|d| serde_json::from_value(d.get("embedding").cloned().unwrap_or(Value::Null)).map_err(bad))
                .collect();
        }
        Err(ProviderError::fatal("response has no vectors"))
    }
}

impl Embedder for HttpEmbedder {
    fn name(&self) -> &str {
        "http-embedding"
    }

    fn model(&self) -> &str {
        &self.model
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(json!({ "model": self.model, "input": texts }))
            .map_err(crate::llm::classify_http_error)?;
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| ProviderError::transient(format!("reading response: {e}")))?;
        Self::parse_vectors(&body)
    }
}

/// Counts `embed` calls made through it.
pub struct CountingEmbedder<E> {
    inner: E,
    calls: AtomicUsize,
}

impl<E: Embedder> CountingEmbedder<E> {
    pub fn new(inner: E) -> Self {
        Self { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<E: Embedder> Embedder for CountingEmbedder<E> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn model(&self) -> &str {
        self.inner.model()
    }
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.embed(texts)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    key: String,
    vector: EmbeddingVector,
}

/// Normalized vectors keyed by digest of (provider, model, text).
///
/// With a backing file, new entries are appended as JSONL on [`save`](Self::save).
#[derive(Default)]
pub struct EmbeddingCache {
    entries: Mutex<HashMap<String, EmbeddingVector>>,
    pending: Mutex<Vec<String>>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut entries = HashMap::new();
        if path.exists() {
            let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for line in body.lines().filter(|l| !l.trim().is_empty()) {
                // a torn final line from an interrupted write is skipped
                if let Ok(entry) = serde_json::from_str::<CacheLine>(line) {
                    entries.insert(entry.key, entry.vector);
                }
            }
        }
        Ok(Self {
            entries: Mutex::new(entries),
            pending: Mutex::new(Vec::new()),
            path: Some(path),
        })
    }

    pub fn key(embedder: &dyn Embedder, text: &str) -> String {
        FieldHasher::new("embedding")
            .field(embedder.name())
            .field(embedder.model())
            .field(text)
            .finish()
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, key: &str) -> Option<EmbeddingVector> {
        self.entries.lock().unwrap().get(key).cloned()
    }

    fn insert(&self, key: String, v: EmbeddingVector) {
        self.entries.lock().unwrap().insert(key.clone(), v);
        self.pending.lock().unwrap().push(key);
    }

    /// Appends entries added since the last save to the backing file.
    pub fn save(&self) -> Result<()> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let mut pending = self.pending.lock().unwrap();
        if pending.is_empty() {
            return Ok(());
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let entries = self.entries.lock().unwrap();
        let mut out = String::new();
        for key in pending.iter() {
            let line = CacheLine { key: key.clone(), vector: entries[key].clone() };
            out.push_str(&serde_json::to_string(&line).map_err(|e| Error::json("embedding cache", e))?);
            out.push('\n');
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
        pending.clear();
        Ok(())
    }
}

pub struct EmbedOptions<'a> {
    pub policy: RetryPolicy,
    pub clock: &'a dyn Clock,
    pub batch_size: usize,
}

/// One unit-norm vector per text, served from `cache` where possible.
pub fn embed_all(
    texts: &[String],
    embedder: &dyn Embedder,
    cache: &EmbeddingCache,
    opts: &EmbedOptions<'_>,
) -> Result<Vec<EmbeddingVector>> {
    if texts.is_empty() {
        return Err(Error::invalid("texts", "nothing to embed"));
    }
    if let Some(i) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::invalid(format!("texts[{i}]"), "empty text"));
    }
    let keys: Vec<String> = texts.iter().map(|t| EmbeddingCache::key(embedder, t)).collect();
    let mut missing: Vec<(String, String)> = Vec::new();
    let mut queued = std::collections::HashSet::new();
    for (key, text) in keys.iter().zip(texts) {
        if cache.get(key).is_none() && queued.insert(key.clone()) {
            missing.push((key.clone(), text.clone()));
        }
    }
    for batch in missing.chunks(opts.batch_size.max(1)) {
        let inputs: Vec<String> = batch.iter().map(|(_, t)| t.clone()).collect();
        let vectors = retry(
            &opts.policy,
            opts.clock,
            |e: &ProviderError| e.kind == FailureKind::Transient,
            |_| embedder.embed(&inputs),
        )
        .map_err(|failed| {
            Error::stage(
                "embed",
                format!("{} failed after {} attempt(s): {}", embedder.name(), failed.attempts, failed.value),
            )
        })?
        .value;
        if vectors.len() != inputs.len() {
            return Err(Error::stage(
                "embed",
                format!("asked for {} vectors, got {}", inputs.len(), vectors.len()),
            ));
        }
        for ((key, _), v) in batch.iter().zip(vectors) {
            cache.insert(key.clone(), EmbeddingVector::normalized(v)?);
        }
    }
    let out: Vec<EmbeddingVector> = keys
        .iter()
        .map(|k| cache.get(k).expect("cached above"))
        .collect();
    let dim = out[0].dim();
    if let Some(i) = out.iter().position(|v| v.dim() != dim) {
        return Err(Error::invalid(
            format!("texts[{i}]"),
            format!("dimension {} differs from {dim}", out[i].dim()),
        ));
    }
    Ok(out)
}

//! Uniform access to chat and embedding backends.
//!
//! Every request is content-addressed: the digest of a canonicalized request
//! is the cache key, so identical requests always resolve to the same entry
//! and a warmed cache replays a full run without any network I/O. Mock
//! backends are pure functions of their inputs, which makes the whole
//! pipeline runnable and testable offline.

pub mod cache;
pub mod http;
pub mod mocks;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use cache::{CacheEntry, ResponseCache};

/// One chat completion request. `sample_index` distinguishes repeated
/// stochastic samples of the same prompt so they get distinct cache keys.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatRequest {
    pub model: String,
    pub system: Option<String>,
    pub prompt: String,
    pub temperature: f64,
    pub sample_index: u32,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            system: None,
            prompt: prompt.into(),
            temperature: 0.0,
            sample_index: 0,
            max_tokens: 1024,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_sample_index(mut self, sample_index: u32) -> Self {
        self.sample_index = sample_index;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::InvalidInput("chat prompt must be nonempty".into()));
        }
        if self.sample_index >= 16 {
            return Err(Error::InvalidInput(format!(
                "sample_index {} out of range (must be < 16)",
                self.sample_index
            )));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(Error::InvalidInput("temperature must be >= 0".into()));
        }
        if self.max_tokens == 0 {
            return Err(Error::InvalidInput("max_tokens must be > 0".into()));
        }
        Ok(())
    }
}

/// A batch embedding request.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedRequest {
    pub model: String,
    pub texts: Vec<String>,
}

impl EmbedRequest {
    pub fn new(model: impl Into<String>, texts: Vec<String>) -> Self {
        EmbedRequest {
            model: model.into(),
            texts,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.texts.is_empty() {
            return Err(Error::InvalidInput("embed request has no texts".into()));
        }
        if self.texts.iter().any(|t| t.is_empty()) {
            return Err(Error::InvalidInput("embed texts must be nonempty".into()));
        }
        Ok(())
    }
}

/// A text-completion backend. Implementations must be pure given the request
/// (mocks) or idempotent behind the cache (HTTP).
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;
    fn complete(&self, req: &ChatRequest) -> Result<String>;
}

/// An embedding backend returning one raw (not yet normalized) vector per
/// input text, in input order.
pub trait EmbedBackend: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, req: &EmbedRequest) -> Result<Vec<Vec<f64>>>;
}

/// Cache key for a chat request: a pure function of the backend name and all
/// request fields. Byte-sensitive in the prompt, insensitive to anything not
/// listed here.
pub fn chat_key(backend_name: &str, req: &ChatRequest) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"chat\n");
    for part in [
        backend_name,
        &req.model,
        req.system.as_deref().unwrap_or(""),
    ] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    hasher.update(format!("t={};s={};m={}\n", req.temperature, req.sample_index, req.max_tokens));
    hasher.update(req.prompt.as_bytes());
    hasher.finalize().into()
}

/// Cache key for an embedding request.
pub fn embed_key(backend_name: &str, req: &EmbedRequest) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(b"embed\n");
    for part in [backend_name, &req.model] {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part.as_bytes());
    }
    for text in &req.texts {
        hasher.update((text.len() as u64).to_le_bytes());
        hasher.update(text.as_bytes());
    }
    hasher.finalize().into()
}

/// Bounds concurrent in-flight backend calls.
struct InFlightLimiter {
    available: Mutex<usize>,
    cv: Condvar,
}

impl InFlightLimiter {
    fn new(limit: usize) -> Self {
        InFlightLimiter {
            available: Mutex::new(limit.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> InFlightGuard<'_> {
        let mut available = self.available.lock().unwrap();
        while *available == 0 {
            available = self.cv.wait(available).unwrap();
        }
        *available -= 1;
        InFlightGuard { limiter: self }
    }
}

struct InFlightGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        *self.limiter.available.lock().unwrap() += 1;
        self.limiter.cv.notify_one();
    }
}

/// Retry policy for backend calls: attempts then exponential backoff.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 250,
        }
    }
}

/// Deterministic request counts for one run; equal across cold and warm runs
/// because logical requests are counted whether they hit or miss the cache.
#[derive(Debug, Default)]
pub struct ProviderStats {
    pub requests: AtomicU64,
    pub cache_hits: AtomicU64,
    pub backend_calls: AtomicU64,
}

impl ProviderStats {
    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
    pub fn cache_hits(&self) -> u64 {
        self.cache_hits.load(Ordering::Relaxed)
    }
    pub fn backend_calls(&self) -> u64 {
        self.backend_calls.load(Ordering::Relaxed)
    }
}

/// A chat backend behind the response cache, retry policy, and in-flight
/// limit.
pub struct ChatProvider {
    backend: Arc<dyn ChatBackend>,
    cache: Option<ResponseCache>,
    limiter: InFlightLimiter,
    retry: RetryPolicy,
    pub stats: ProviderStats,
}

impl ChatProvider {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        ChatProvider {
            backend,
            cache: None,
            limiter: InFlightLimiter::new(8),
            retry: RetryPolicy::default(),
            stats: ProviderStats::default(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_in_flight_limit(mut self, limit: usize) -> Self {
        self.limiter = InFlightLimiter::new(limit);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Returns the completion text, serving from cache when possible.
    pub fn chat(&self, req: &ChatRequest) -> Result<String> {
        req.validate()?;
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        let key = chat_key(self.backend.name(), req);
        if let Some(cache) = &self.cache {
            if let Some(bytes) = cache.get(&key)? {
                self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
                return String::from_utf8(bytes)
                    .map_err(|e| Error::BadReply(format!("cached payload not utf-8: {e}")));
            }
        }
        let text = self.call_with_retry(req, &key)?;
        if let Some(cache) = &self.cache {
            cache.put(&key, text.as_bytes())?;
        }
        Ok(text)
    }

    fn call_with_retry(&self, req: &ChatRequest, key: &[u8; 32]) -> Result<String> {
        let _guard = self.limiter.acquire();
        let mut last_err = None;
        for attempt in 0..self.retry.attempts {
            if attempt > 0 {
                let delay = self.retry.base_delay_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(std::time::Duration::from_millis(delay));
            }
            self.stats.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.complete(req) {
                Ok(text) => return Ok(text),
                Err(e) => last_err = Some(e),
            }
        }
        Err(Error::Provider {
            digest: hex::encode(key),
            message: format!(
                "chat backend {:?} failed after {} attempts: {}",
                self.backend.name(),
                self.retry.attempts,
                last_err.map(|e| e.to_string()).unwrap_or_default()
            ),
        })
    }
}

/// An embedding backend behind the cache; output vectors are always
/// L2-normalized here, regardless of what the backend returns.
pub struct EmbedProvider {
    backend: Arc<dyn EmbedBackend>,
    cache: Option<ResponseCache>,
    limiter: InFlightLimiter,
    retry: RetryPolicy,
    pub stats: ProviderStats,
}

impl EmbedProvider {
    pub fn new(backend: Arc<dyn EmbedBackend>) -> Self {
        EmbedProvider {
            backend,
            cache: None,
            limiter: InFlightLimiter::new(8),
            retry: RetryPolicy::default(),
            stats: ProviderStats::default(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_in_flight_limit(mut self, limit: usize) -> Self {
        self.limiter = InFlightLimiter::new(limit);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// One unit-norm vector per input text, in input order.
    pub fn embed(&self, req: &EmbedRequest) -> Result<Vec<Vec<f64>>> {
        req.validate()?;
        self.stats.requests.fetch_add(1, Ordering::Relaxed);
        let key = embed_key(self.backend.name(), req);
        let raw: Vec<Vec<f64>> = if let Some(bytes) = self
            .cache
            .as_ref()
            .map(|c| c.get(&key))
            .transpose()?
            .flatten()
        {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::BadReply(format!("cached vectors unreadable: {e}")))?
        } else {
            let raw = self.call_with_retry(req, &key)?;
            if let Some(cache) = &self.cache {
                let bytes = serde_json::to_vec(&raw)
                    .map_err(|e| Error::BadReply(format!("vectors unserializable: {e}")))?;
                cache.put(&key, &bytes)?;
            }
            raw
        };
        if raw.len() != req.texts.len() {
            return Err(Error::BadReply(format!(
                "embedding backend returned {} vectors for {} texts",
                raw.len(),
                req.texts.len()
            )));
        }
        let dim = raw.first().map(|v| v.len()).unwrap_or(0);
        if raw.iter().any(|v| v.len() != dim) {
            return Err(Error::BadReply(
                "embedding dimension mismatch across batch".into(),
            ));
        }
        raw.into_iter()
            .enumerate()
            .map(|(i, v)| {
                normalize(v).ok_or_else(|| {
                    Error::BadReply(format!(
                        "zero-norm embedding for text {:?}",
                        truncate(&req.texts[i])
                    ))
                })
            })
            .collect()
    }

    fn call_with_retry(&self, req: &EmbedRequest, key: &[u8; 32]) -> Result<Vec<Vec<f64>>> {
        let _guard = self.limiter.acquire();
        let mut last_err = None;
        for attempt in 0..self.retry.attempts {
            if attempt > 0 {
                let delay = self.retry.base_delay_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(std::time::Duration::from_millis(delay));
            }
            self.stats.backend_calls.fetch_add(1, Ordering::Relaxed);
            match self.backend.embed(req) {
                Ok(v) => return Ok(v),
                Err(e) => last_err = Some(e),
            }
        }
        Err(Error::Provider {
            digest: hex::encode(key),
            message: format!(
                "embed backend {:?} failed after {} attempts: {}",
                self.backend.name(),
                self.retry.attempts,
                last_err.map(|e| e.to_string()).unwrap_or_default()
            ),
        })
    }
}

fn normalize(v: Vec<f64>) -> Option<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm <= f64::EPSILON {
        return None;
    }
    Some(v.into_iter().map(|x| x / norm).collect())
}

fn truncate(text: &str) -> String {
    text.chars().take(40).collect()
}

//! Chat-completion access: request/response types, a pluggable client
//! trait, and a gateway that adds retry, bounded concurrency, and
//! response validation on top of any client.
//!
//! Requests are canonical values: the same messages + sampling + n
//! always produce the same [`request_digest`], which is what the replay
//! client keys its fixtures on. Keep anything nondeterministic (timestamps,
//! attempt counters) out of [`ChatRequest`].

pub mod http;
pub mod replay;
pub mod templates;

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Speaker of a chat message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Decoding parameters sent with every request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_k: Option<u32>,
    pub repetition_penalty: f64,
    pub max_tokens: u32,
}

impl SamplingParams {
    /// Sampled decoding used when tagging questions with KCs.
    pub fn annotation() -> Self {
        Self { temperature: 0.5, top_p: 0.8, top_k: None, repetition_penalty: 1.05, max_tokens: 1024 }
    }

    /// Greedy decoding for answering evaluation questions.
    pub fn evaluation() -> Self {
        Self { temperature: 0.0, top_p: 1.0, top_k: Some(1), repetition_penalty: 1.0, max_tokens: 512 }
    }

    /// Sampled decoding for error diagnosis.
    pub fn diagnosis() -> Self {
        Self { temperature: 0.5, top_p: 0.8, top_k: None, repetition_penalty: 1.05, max_tokens: 1024 }
    }

    /// Sampled decoding with a long budget for question synthesis and
    /// augmentation.
    pub fn synthesis() -> Self {
        Self { temperature: 0.5, top_p: 0.8, top_k: None, repetition_penalty: 1.05, max_tokens: 4096 }
    }

    /// Greedy decoding for quality scoring.
    pub fn scoring() -> Self {
        Self { temperature: 0.0, top_p: 1.0, top_k: Some(1), repetition_penalty: 1.05, max_tokens: 512 }
    }
}

/// A complete, validated chat request. Construct via [`ChatRequest::new`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub sampling: SamplingParams,
    pub n_samples: u32,
}

impl ChatRequest {
    pub fn new(
        messages: Vec<Message>,
        sampling: SamplingParams,
        n_samples: u32,
    ) -> Result<Self, GatewayError> {
        let req = Self { messages, sampling, n_samples };
        req.check()?;
        Ok(req)
    }

    fn check(&self) -> Result<(), GatewayError> {
        let invalid = |msg: &str| Err(GatewayError::InvalidRequest(msg.to_string()));
        match self.messages.last() {
            None => return invalid("messages must be nonempty"),
            Some(last) if last.role != Role::User => {
                return invalid("last message must have role user")
            }
            _ => {}
        }
        let s = &self.sampling;
        if !(s.temperature >= 0.0) {
            return invalid("temperature must be >= 0");
        }
        if !(s.top_p > 0.0 && s.top_p <= 1.0) {
            return invalid("top_p must be in (0, 1]");
        }
        if s.top_k == Some(0) {
            return invalid("top_k must be >= 1 when set");
        }
        if !(s.repetition_penalty > 0.0) {
            return invalid("repetition_penalty must be > 0");
        }
        if s.max_tokens == 0 {
            return invalid("max_tokens must be >= 1");
        }
        if self.n_samples == 0 {
            return invalid("n_samples must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One provider response: the sampled completions plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub completions: Vec<String>,
    pub model_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage: Option<TokenUsage>,
}

/// Failures a client can report for a single call.
#[derive(Debug, Error)]
pub enum ClientError {
    /// Network-level failure; `transient` marks it retryable.
    #[error("transport error: {message}")]
    Transport { message: String, transient: bool },
    /// Provider pushed back; always retryable.
    #[error("rate limited: {message}")]
    RateLimited { message: String },
    /// Response arrived but could not be understood.
    #[error("malformed response: {message}")]
    Malformed { message: String },
}

impl ClientError {
    fn is_transient(&self) -> bool {
        match self {
            ClientError::Transport { transient, .. } => *transient,
            ClientError::RateLimited { .. } => true,
            ClientError::Malformed { .. } => false,
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    /// All attempts failed; holds the final client error.
    #[error("request failed after {attempts} attempt(s): {source}")]
    Exhausted {
        attempts: u32,
        #[source]
        source: ClientError,
    },
    #[error("empty completion list from {model_id}")]
    EmptyResponse { model_id: String },
}

/// Anything that can answer a chat request. Implementations must be safe
/// to call from several threads at once.
pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;
}

/// Stable hex digest of a request; used as the replay fixture key.
pub fn request_digest(request: &ChatRequest) -> String {
    let canonical = serde_json::to_vec(request).expect("request serializes");
    hex::encode(Sha256::digest(&canonical))
}

/// Retry schedule: exponential backoff with jitter, capped.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Policy with no waiting between attempts; used by tests and replay runs.
    pub fn immediate(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    fn delay_for(&self, attempt: u32) -> Duration {
        if self.base_delay.is_zero() {
            return Duration::ZERO;
        }
        let exp = self.base_delay.saturating_mul(1u32 << attempt.min(16));
        let capped = exp.min(self.max_delay);
        // +/- 50% jitter from a thread-local source; retry timing is the one
        // place nondeterminism is acceptable because it never touches output.
        let jitter = 0.5 + rand::random::<f64>();
        capped.mul_f64(jitter)
    }
}

/// Counting semaphore; caps requests in flight across threads.
struct InFlightLimiter {
    slots: Mutex<usize>,
    freed: Condvar,
}

impl InFlightLimiter {
    fn new(limit: usize) -> Self {
        Self { slots: Mutex::new(limit.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> LimiterGuard<'_> {
        let mut slots = self.slots.lock().expect("limiter lock");
        while *slots == 0 {
            slots = self.freed.wait(slots).expect("limiter wait");
        }
        *slots -= 1;
        LimiterGuard { limiter: self }
    }
}

struct LimiterGuard<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for LimiterGuard<'_> {
    fn drop(&mut self) {
        let mut slots = self.limiter.slots.lock().expect("limiter lock");
        *slots += 1;
        self.limiter.freed.notify_one();
    }
}

/// Default cap on concurrent requests per gateway.
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// Retrying, concurrency-bounded front door to a [`ChatClient`].
///
/// A request holds its in-flight slot across retries; transient transport
/// failures and rate limits are retried, everything else returns at once.
pub struct Gateway {
    client: Arc<dyn ChatClient>,
    retry: RetryPolicy,
    limiter: InFlightLimiter,
}

impl Gateway {
    pub fn new(client: Arc<dyn ChatClient>) -> Self {
        Self::with_policy(client, RetryPolicy::default(), DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn with_policy(client: Arc<dyn ChatClient>, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self { client, retry, limiter: InFlightLimiter::new(max_in_flight) }
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.check()?;
        let _slot = self.limiter.acquire();
        let mut attempt = 0;
        loop {
            match self.client.complete(request) {
                Ok(response) => {
                    if response.completions.is_empty() {
                        return Err(GatewayError::EmptyResponse { model_id: response.model_id });
                    }
                    return Ok(response);
                }
                Err(err) => {
                    attempt += 1;
                    if !err.is_transient() || attempt >= self.retry.max_attempts {
                        return Err(GatewayError::Exhausted { attempts: attempt, source: err });
                    }
                    std::thread::sleep(self.retry.delay_for(attempt - 1));
                }
            }
        }
    }
}

/// Map `f` over `items` on up to `workers` threads, preserving order.
///
/// Results come back exactly as `items.iter().map(...)` would produce them;
/// only wall-clock interleaving varies between runs.
pub fn parallel_map<I, O, F>(items: &[I], workers: usize, f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(usize, &I) -> O + Sync,
{
    let workers = workers.max(1).min(items.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut results: Vec<Option<O>> = Vec::with_capacity(items.len());
    results.resize_with(items.len(), || None);
    let slots = Mutex::new(&mut results);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(i, &items[i]);
                slots.lock().expect("result lock")[i] = Some(out);
            });
        }
    });
    results.into_iter().map(|slot| slot.expect("worker filled slot")).collect()
}

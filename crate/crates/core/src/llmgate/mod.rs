//! Completion backends: an OpenAI-compatible HTTP client, deterministic
//! mocks, a content-addressed response cache, and a gate that bounds
//! in-flight requests, spaces them out and retries transient failures.

mod cache;
mod mock;
mod openai;

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cache::{CacheStats, CachedBackend};
pub use mock::{CopyMock, GoldIndex, OracleMock, OverpredictMock, ScriptedMock, YesNoOracleMock};
pub use openai::{ApiFlavor, OpenAiBackend, OpenAiConfig, ENV_API_BASE, ENV_API_KEY};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited by the endpoint")]
    RateLimited,
    #[error("authentication failed: {0}")]
    AuthFailure(String),
    #[error("prompt exceeds the model context: {0}")]
    ContextOverflow(String),
    #[error("prompt does not match the expected template: {0}")]
    UnparseablePrompt(String),
    #[error("no scripted response for prompt {0}")]
    NoScriptedResponse(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("cache error: {0}")]
    Cache(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Timeout | LlmError::RateLimited)
    }
}

/// Decoding parameters for one completion. Defaults are greedy decoding
/// with a 512-token completion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub top_p: f64,
    pub frequency_penalty: f64,
    pub presence_penalty: f64,
    pub best_of: u32,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 512,
            temperature: 0.0,
            top_p: 1.0,
            frequency_penalty: 0.0,
            presence_penalty: 0.0,
            best_of: 1,
        }
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    fn validate(&self) -> Result<(), LlmError> {
        if self.prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResponse {
    /// Completion text only, never the echoed prompt.
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
    pub latency_ms: u64,
}

/// Anything that turns a prompt into a completion. Handles are shared
/// across worker threads.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError>;
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn id(&self) -> &str {
        (**self).id()
    }
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        (**self).complete(request)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (1-based): base * 2^(attempt-1),
    /// capped.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

struct Slots {
    in_flight: Mutex<usize>,
    freed: Condvar,
}

/// Bounds concurrent requests to `max_in_flight`, keeps at least
/// `min_interval` between request starts, and retries `Timeout` and
/// `RateLimited` with exponential backoff.
pub struct GatedBackend<B> {
    inner: B,
    max_in_flight: usize,
    min_interval: Duration,
    retry: RetryPolicy,
    slots: Slots,
    next_start: Mutex<Instant>,
}

impl<B: Backend> GatedBackend<B> {
    pub fn new(inner: B, max_in_flight: usize) -> Self {
        Self {
            inner,
            max_in_flight: max_in_flight.max(1),
            min_interval: Duration::ZERO,
            retry: RetryPolicy::default(),
            slots: Slots {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
            },
            next_start: Mutex::new(Instant::now()),
        }
    }

    pub fn with_min_interval(mut self, interval: Duration) -> Self {
        self.min_interval = interval;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn acquire(&self) {
        let mut n = self.slots.in_flight.lock().unwrap();
        while *n >= self.max_in_flight {
            n = self.slots.freed.wait(n).unwrap();
        }
        *n += 1;
    }

    fn release(&self) {
        let mut n = self.slots.in_flight.lock().unwrap();
        *n -= 1;
        self.slots.freed.notify_one();
    }

    fn pace(&self) {
        if self.min_interval.is_zero() {
            return;
        }
        let wait = {
            let mut next = self.next_start.lock().unwrap();
            let now = Instant::now();
            let start = (*next).max(now);
            *next = start + self.min_interval;
            start - now
        };
        if !wait.is_zero() {
            std::thread::sleep(wait);
        }
    }
}

impl<B: Backend> Backend for GatedBackend<B> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, LlmError> {
        request.validate()?;
        let mut attempt = 1;
        loop {
            self.pace();
            self.acquire();
            let result = self.inner.complete(request);
            self.release();
            match result {
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    let delay = self.retry.delay(attempt);
                    log::warn!("{}: {e}; retry {attempt} in {delay:?}", self.inner.id());
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

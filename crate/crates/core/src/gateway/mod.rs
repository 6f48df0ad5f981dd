//! Uniform chat-completion access: scripted mock, live HTTP provider,
//! content-addressed response cache, retry policy and a per-run call budget.

mod cache;
mod live;
mod script;

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cache::{CacheEntry, CacheFormatError, CacheHeader, ResponseCache};
pub use live::{HttpReply, HttpTransport, LiveProvider, UreqTransport, API_KEY_ENV};
pub use script::{glob_match, ProviderScript, ScriptRule, ScriptedProvider};

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub provider_id: String,
    pub model_id: String,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Pipeline stage label such as `panelist:edge_case_specialist`.
    pub request_tag: String,
}

/// Provider/model settings shared by every request of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub provider_id: String,
    pub model_id: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            provider_id: "script".into(),
            model_id: "scripted".into(),
            temperature: DEFAULT_TEMPERATURE,
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
        }
    }
}

impl ModelSettings {
    pub fn request(
        &self,
        tag: impl Into<String>,
        system_text: impl Into<String>,
        user_text: impl Into<String>,
    ) -> ChatRequest {
        ChatRequest {
            provider_id: self.provider_id.clone(),
            model_id: self.model_id.clone(),
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: self.temperature,
            max_output_tokens: self.max_output_tokens,
            request_tag: tag.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatExchange {
    pub request: ChatRequest,
    pub reply_text: String,
    pub latency_ms: u64,
    pub cache_hit: bool,
    pub attempt_count: u32,
}

impl ChatExchange {
    pub fn key(&self) -> String {
        cache_key(&self.request)
    }
}

/// Content hash over everything that determines a reply. The request tag is
/// deliberately left out so identical calls from different stages share an
/// entry.
pub fn cache_key(request: &ChatRequest) -> String {
    #[derive(Serialize)]
    struct Keyed<'a> {
        provider_id: &'a str,
        model_id: &'a str,
        temperature_bits: u64,
        system_text: &'a str,
        user_text: &'a str,
        max_output_tokens: u32,
    }
    let keyed = Keyed {
        provider_id: &request.provider_id,
        model_id: &request.model_id,
        temperature_bits: request.temperature.to_bits(),
        system_text: &request.system_text,
        user_text: &request.user_text,
        max_output_tokens: request.max_output_tokens,
    };
    let bytes = serde_json::to_vec(&keyed).expect("key material serializes");
    hex::encode(Sha256::digest(&bytes))
}

/// Failure reported by a single provider call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProviderFailure {
    /// Transport error, HTTP 429 or 5xx. Retried.
    Transient(String),
    /// Anything else the provider rejected. Not retried.
    Permanent(String),
    ScriptMiss,
    CacheMiss,
}

pub trait Provider: Send + Sync {
    fn call(&self, request: &ChatRequest) -> Result<String, ProviderFailure>;

    /// Whether the provider reaches a real endpoint.
    fn is_live(&self) -> bool {
        false
    }
}

/// Provider that never answers; pairs with a cache for replay.
#[derive(Debug, Default)]
pub struct OfflineProvider;

impl Provider for OfflineProvider {
    fn call(&self, _request: &ChatRequest) -> Result<String, ProviderFailure> {
        Err(ProviderFailure::CacheMiss)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("provider failed after {attempts} attempt(s): {message}")]
    Provider { attempts: u32, message: String },
    #[error("no script rule matches request tagged {tag:?}")]
    ScriptMiss { tag: String },
    #[error("call budget of {limit} provider calls exhausted")]
    Budget { limit: usize },
    #[error("no cached exchange for request tagged {tag:?} (key {key})")]
    CacheMiss { tag: String, key: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("response cache: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub backoff_factor: u32,
}

impl Default for RetryPolicy {
    /// Three attempts with 1 s then 4 s between them.
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_backoff: Duration::from_secs(1),
            backoff_factor: 4,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            initial_backoff: Duration::ZERO,
            backoff_factor: 1,
        }
    }

    /// Delay before attempt `attempt + 1`, for `attempt >= 1`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        self.initial_backoff * self.backoff_factor.saturating_pow(attempt.saturating_sub(1))
    }
}

pub struct Gateway {
    provider: Arc<dyn Provider>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    budget: Option<usize>,
    calls: AtomicUsize,
    /// Per-key locks so concurrent identical requests share one reply.
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Gateway {
    pub fn new(provider: Arc<dyn Provider>) -> Self {
        Self {
            provider,
            cache: None,
            retry: RetryPolicy::default(),
            budget: None,
            calls: AtomicUsize::new(0),
            inflight: Mutex::default(),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_budget(mut self, max_calls: usize) -> Self {
        self.budget = Some(max_calls);
        self
    }

    /// Provider calls made so far (cache hits excluded).
    pub fn provider_calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn provider_is_live(&self) -> bool {
        self.provider.is_live()
    }

    pub fn complete(&self, request: ChatRequest) -> Result<ChatExchange, GatewayError> {
        if request.system_text.is_empty() || request.user_text.is_empty() {
            return Err(GatewayError::InvalidRequest(format!(
                "{}: system_text and user_text must be non-empty",
                request.request_tag
            )));
        }
        if !(0.0..=1.0).contains(&request.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 1]",
                request.temperature
            )));
        }
        let started = Instant::now();
        let key = cache_key(&request);
        let key_lock = self.cache.as_ref().map(|_| {
            let mut inflight = self.inflight.lock().unwrap_or_else(|p| p.into_inner());
            Arc::clone(inflight.entry(key.clone()).or_default())
        });
        let _held = key_lock.as_ref().map(|l| l.lock().unwrap_or_else(|p| p.into_inner()));
        if let Some(cache) = &self.cache {
            let hit = cache.get(&key).map_err(|e| GatewayError::Cache(e.to_string()))?;
            if let Some(entry) = hit {
                return Ok(ChatExchange {
                    request,
                    reply_text: entry.reply,
                    latency_ms: elapsed_ms(started),
                    cache_hit: true,
                    attempt_count: 1,
                });
            }
        }

        let reserved = self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(limit) = self.budget {
            if reserved >= limit {
                self.calls.fetch_sub(1, Ordering::SeqCst);
                return Err(GatewayError::Budget { limit });
            }
        }

        let mut attempt = 0;
        let reply = loop {
            attempt += 1;
            match self.provider.call(&request) {
                Ok(reply) => break reply,
                Err(ProviderFailure::Transient(message)) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(GatewayError::Provider {
                            attempts: attempt,
                            message,
                        });
                    }
                    log::warn!(
                        "{}: transient provider failure (attempt {attempt}): {message}",
                        request.request_tag
                    );
                    thread::sleep(self.retry.backoff(attempt));
                }
                Err(ProviderFailure::Permanent(message)) => {
                    return Err(GatewayError::Provider {
                        attempts: attempt,
                        message,
                    })
                }
                Err(ProviderFailure::ScriptMiss) => {
                    return Err(GatewayError::ScriptMiss {
                        tag: request.request_tag.clone(),
                    })
                }
                Err(ProviderFailure::CacheMiss) => {
                    return Err(GatewayError::CacheMiss {
                        tag: request.request_tag.clone(),
                        key,
                    })
                }
            }
        };

        if let Some(cache) = &self.cache {
            cache
                .put(&key, &request, &reply)
                .map_err(|e| GatewayError::Cache(e.to_string()))?;
        }
        Ok(ChatExchange {
            request,
            reply_text: reply,
            latency_ms: elapsed_ms(started),
            cache_hit: false,
            attempt_count: attempt,
        })
    }
}

fn elapsed_ms(started: Instant) -> u64 {
    u64::try_from(started.elapsed().as_millis()).unwrap_or(u64::MAX)
}

//! Chat-completion backends.
//!
//! The optimizer talks to a [`ChatBackend`]. Real endpoints go through
//! [`HttpBackend`] (OpenAI-compatible `/chat/completions`), offline runs use
//! [`MockBackend`]. This layer only separates transport success from failure;
//! judging the content is the optimizer's job.

mod http;
mod mock;

use std::collections::BTreeSet;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpBackendConfig};
pub use mock::{mock_heuristic_backend, MockBackend, MockMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_message: String,
    pub user_message: String,
    pub temperature: f64,
    pub model_name: String,
    pub max_output_tokens: u32,
}

impl ChatRequest {
    pub fn new(system_message: impl Into<String>, user_message: impl Into<String>) -> Self {
        ChatRequest {
            system_message: system_message.into(),
            user_message: user_message.into(),
            temperature: 1.0,
            model_name: String::new(),
            max_output_tokens: 4096,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub input: u64,
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub latency: Duration,
    pub token_usage: Option<TokenUsage>,
    /// Transport attempts spent, including the successful one.
    pub attempts: u32,
}

/// Failure classes that a [`RetryPolicy`] may retry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorClass {
    RateLimited,
    ServerError,
    Timeout,
    Connection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub backoff_base: Duration,
    pub retry_on: BTreeSet<ErrorClass>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 4,
            backoff_base: Duration::from_millis(500),
            retry_on: [
                ErrorClass::RateLimited,
                ErrorClass::ServerError,
                ErrorClass::Timeout,
                ErrorClass::Connection,
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl RetryPolicy {
    pub fn no_retry() -> Self {
        RetryPolicy {
            max_attempts: 1,
            ..RetryPolicy::default()
        }
    }

    fn backoff(&self, attempt: u32) -> Duration {
        self.backoff_base.saturating_mul(1u32 << (attempt - 1).min(16))
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("authentication rejected by backend (HTTP {status})")]
    Authentication { status: u16 },
    #[error("backend returned HTTP {status} after {attempts} attempt(s): {detail}")]
    Http {
        status: u16,
        attempts: u32,
        detail: String,
    },
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: u32 },
    #[error("connection failed after {attempts} attempt(s): {detail}")]
    Connection { attempts: u32, detail: String },
    #[error("malformed reply envelope: {0}")]
    MalformedEnvelope(String),
    #[error("replay script exhausted after {calls} call(s)")]
    ReplayExhausted { calls: usize },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl GatewayError {
    pub fn class(&self) -> Option<ErrorClass> {
        match self {
            GatewayError::Http { status: 429, .. } => Some(ErrorClass::RateLimited),
            GatewayError::Http { status, .. } if *status >= 500 => Some(ErrorClass::ServerError),
            GatewayError::Timeout { .. } => Some(ErrorClass::Timeout),
            GatewayError::Connection { .. } => Some(ErrorClass::Connection),
            _ => None,
        }
    }

    fn with_attempts(self, n: u32) -> Self {
        match self {
            GatewayError::Http { status, detail, .. } => GatewayError::Http {
                status,
                attempts: n,
                detail,
            },
            GatewayError::Timeout { .. } => GatewayError::Timeout { attempts: n },
            GatewayError::Connection { detail, .. } => GatewayError::Connection { attempts: n, detail },
            other => other,
        }
    }
}

/// A successful single exchange with a backend.
#[derive(Debug, Clone, PartialEq)]
pub struct RawReply {
    pub text: String,
    pub token_usage: Option<TokenUsage>,
}

/// One request/reply exchange, without retries.
pub trait Transport: Send + Sync {
    fn send_once(&self, request: &ChatRequest) -> Result<RawReply, GatewayError>;
}

/// Sends `request` over `transport`, retrying the failure classes listed in
/// `policy` with exponential backoff.
pub fn complete(
    request: &ChatRequest,
    transport: &dyn Transport,
    policy: &RetryPolicy,
) -> Result<ChatResponse, GatewayError> {
    let started = std::time::Instant::now();
    let max = policy.max_attempts.max(1);
    let mut attempt = 1;
    loop {
        match transport.send_once(request) {
            Ok(reply) => {
                return Ok(ChatResponse {
                    text: reply.text,
                    latency: started.elapsed(),
                    token_usage: reply.token_usage,
                    attempts: attempt,
                })
            }
            Err(e) => {
                let retryable = e.class().is_some_and(|c| policy.retry_on.contains(&c));
                if !retryable || attempt >= max {
                    return Err(e.with_attempts(attempt));
                }
                log::warn!("backend attempt {attempt}/{max} failed ({e}); retrying");
                std::thread::sleep(policy.backoff(attempt));
                attempt += 1;
            }
        }
    }
}

/// Anything that can answer a chat request.
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    fn model_name(&self) -> &str {
        ""
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

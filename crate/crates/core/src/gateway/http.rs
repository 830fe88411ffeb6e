use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{complete, ChatBackend, ChatRequest, ChatResponse, GatewayError, RawReply, RetryPolicy, TokenUsage, Transport};

pub const DEFAULT_API_KEY_ENV: &str = "OPENAI_API_KEY";
pub const BASE_URL_ENV: &str = "DSMCO_BASE_URL";
pub const MODEL_ENV: &str = "DSMCO_MODEL";

/// Settings for an OpenAI-compatible endpoint. Unset fields fall back to the
/// `DSMCO_BASE_URL` / `DSMCO_MODEL` environment variables; the key is always
/// read from the variable named by `api_key_env`.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpBackendConfig {
    pub name: String,
    pub base_url: Option<String>,
    pub model: Option<String>,
    pub api_key_env: String,
    pub timeout_secs: u64,
    pub retry: RetryPolicy,
}

impl Default for HttpBackendConfig {
    fn default() -> Self {
        HttpBackendConfig {
            name: "http".to_owned(),
            base_url: None,
            model: None,
            api_key_env: DEFAULT_API_KEY_ENV.to_owned(),
            timeout_secs: 300,
            retry: RetryPolicy::default(),
        }
    }
}

impl fmt::Debug for HttpBackendConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackendConfig")
            .field("name", &self.name)
            .field("base_url", &self.base_url)
            .field("model", &self.model)
            .field("api_key_env", &self.api_key_env)
            .field("timeout_secs", &self.timeout_secs)
            .finish_non_exhaustive()
    }
}

/// OpenAI-compatible chat-completions client.
pub struct HttpBackend {
    name: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    policy: RetryPolicy,
    client: reqwest::blocking::Client,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("name", &self.name)
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpBackend {
    pub fn new(
        name: impl Into<String>,
        base_url: &str,
        model: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
        policy: RetryPolicy,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(HttpBackend {
            name: name.into(),
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            model: model.into(),
            api_key: api_key.filter(|k| !k.is_empty()),
            policy,
            client,
        })
    }

    pub fn from_config(config: &HttpBackendConfig) -> Result<Self, GatewayError> {
        let from_env = |var: &str| std::env::var(var).ok().filter(|v| !v.is_empty());
        let base_url = config
            .base_url
            .clone()
            .or_else(|| from_env(BASE_URL_ENV))
            .ok_or_else(|| GatewayError::Config(format!("no base URL (set base_url or {BASE_URL_ENV})")))?;
        let model = config
            .model
            .clone()
            .or_else(|| from_env(MODEL_ENV))
            .ok_or_else(|| GatewayError::Config(format!("no model name (set model or {MODEL_ENV})")))?;
        let api_key = from_env(&config.api_key_env);
        if api_key.is_none() {
            log::warn!("environment variable {} is not set; sending unauthenticated requests", config.api_key_env);
        }
        Self::new(
            config.name.clone(),
            &base_url,
            model,
            api_key,
            Duration::from_secs(config.timeout_secs),
            config.retry.clone(),
        )
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn scrub(&self, text: &str) -> String {
        let mut out: String = text.chars().take(300).collect();
        if let Some(key) = &self.api_key {
            out = out.replace(key.as_str(), "<redacted>");
        }
        out
    }
}

fn parse_envelope(body: &Value) -> Result<RawReply, GatewayError> {
    let text = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::MalformedEnvelope("missing choices[0].message.content".into()))?;
    let usage = body.get("usage").and_then(|u| {
        Some(TokenUsage {
            input: u.get("prompt_tokens")?.as_u64()?,
            output: u.get("completion_tokens")?.as_u64()?,
        })
    });
    Ok(RawReply {
        text: text.to_owned(),
        token_usage: usage,
    })
}

impl Transport for HttpBackend {
    fn send_once(&self, request: &ChatRequest) -> Result<RawReply, GatewayError> {
        let model = if request.model_name.is_empty() {
            &self.model
        } else {
            &request.model_name
        };
        let payload = json!({
            "model": model,
            "messages": [
                {"role": "system", "content": request.system_message},
                {"role": "user", "content": request.user_message},
            ],
            "temperature": request.temperature,
            "max_tokens": request.max_output_tokens,
        });
        log::debug!("POST {} (model {model})", self.endpoint);
        let mut builder = self.client.post(&self.endpoint).json(&payload);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout { attempts: 1 }
            } else {
                GatewayError::Connection {
                    attempts: 1,
                    detail: self.scrub(&e.to_string()),
                }
            }
        })?;
        let status = resp.status().as_u16();
        if status == 401 || status == 403 {
            return Err(GatewayError::Authentication { status });
        }
        let body = resp.text().map_err(|e| {
            if e.is_timeout() {
                GatewayError::Timeout { attempts: 1 }
            } else {
                GatewayError::Connection {
                    attempts: 1,
                    detail: self.scrub(&e.to_string()),
                }
            }
        })?;
        if !(200..300).contains(&status) {
            return Err(GatewayError::Http {
                status,
                attempts: 1,
                detail: self.scrub(&body),
            });
        }
        let value: Value = serde_json::from_str(&body)
            .map_err(|e| GatewayError::MalformedEnvelope(format!("reply is not JSON: {e}")))?;
        parse_envelope(&value)
    }
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn model_name(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        complete(request, self, &self.policy)
    }
}

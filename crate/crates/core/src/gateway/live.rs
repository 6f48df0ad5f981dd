//! OpenAI-compatible chat-completions endpoint.

use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatRequest, Provider, ProviderFailure};

pub const API_KEY_ENV: &str = "ORACLE_FORGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

pub trait HttpTransport: Send + Sync {
    /// `Err` only for transport-level failures; HTTP error statuses come
    /// back as `Ok` with their status code.
    fn post_json(&self, url: &str, bearer: &str, body: &Value) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(300))
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, bearer: &str, body: &Value) -> Result<HttpReply, String> {
        let mut resp = self
            .agent
            .post(url)
            .header("Authorization", &format!("Bearer {bearer}"))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

pub struct LiveProvider {
    base_url: String,
    api_key: String,
    transport: Box<dyn HttpTransport>,
}

impl LiveProvider {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, transport: Box<dyn HttpTransport>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: api_key.into(),
            transport,
        }
    }

    /// Reads the bearer token from `ORACLE_FORGE_API_KEY`.
    pub fn from_env(base_url: impl Into<String>) -> Result<Self, String> {
        let key = std::env::var(API_KEY_ENV).map_err(|_| format!("{API_KEY_ENV} is not set"))?;
        Ok(Self::new(base_url, key, Box::new(UreqTransport::default())))
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

pub(crate) fn request_body(request: &ChatRequest) -> Value {
    json!({
        "model": request.model_id,
        "messages": [
            {"role": "system", "content": request.system_text},
            {"role": "user", "content": request.user_text},
        ],
        "temperature": request.temperature,
        "max_tokens": request.max_output_tokens,
    })
}

pub(crate) fn parse_reply(body: &str) -> Result<String, String> {
    let value: Value = serde_json::from_str(body).map_err(|e| format!("bad JSON body: {e}"))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| "response has no choices[0].message.content".to_string())
}

impl Provider for LiveProvider {
    fn call(&self, request: &ChatRequest) -> Result<String, ProviderFailure> {
        let reply = self
            .transport
            .post_json(&self.endpoint(), &self.api_key, &request_body(request))
            .map_err(ProviderFailure::Transient)?;
        match reply.status {
            200..=299 => parse_reply(&reply.body).map_err(ProviderFailure::Permanent),
            429 | 500..=599 => Err(ProviderFailure::Transient(format!(
                "HTTP {}: {}",
                reply.status,
                snippet(&reply.body)
            ))),
            status => Err(ProviderFailure::Permanent(format!(
                "HTTP {status}: {}",
                snippet(&reply.body)
            ))),
        }
    }

    fn is_live(&self) -> bool {
        true
    }
}

fn snippet(body: &str) -> &str {
    match body.char_indices().nth(500) {
        Some((i, _)) => &body[..i],
        None => body,
    }
}

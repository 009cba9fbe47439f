//! OpenAI-compatible `/chat/completions` client with token logprobs.

use std::thread;
use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{
    ChatBackend, ChatRequest, Completion, CompletionToken, ContentPart, GatewayError, Role, Usage,
};

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    /// Wait before retry `n` (0-based) is `base_backoff * 2^n`.
    pub base_backoff: Duration,
    pub attempt_timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_backoff: Duration::from_secs(1),
            attempt_timeout: Duration::from_secs(120),
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, retry: u32) -> Duration {
        self.base_backoff * 2u32.saturating_pow(retry)
    }
}

#[derive(Debug, Clone)]
pub struct OpenAiConfig {
    /// Base URL up to and including the version segment, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub retry: RetryPolicy,
}

pub struct OpenAiBackend {
    config: OpenAiConfig,
    client: reqwest::blocking::Client,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self, GatewayError> {
        if config.base_url.trim().is_empty() {
            return Err(GatewayError::NotConfigured("MODEL_BASE_URL is empty".into()));
        }
        if config.model.trim().is_empty() {
            return Err(GatewayError::NotConfigured("MODEL_NAME is empty".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(config.retry.attempt_timeout)
            .build()
            .map_err(|e| GatewayError::NotConfigured(e.to_string()))?;
        Ok(Self { config, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                };
                let content: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text(t) => json!({"type": "text", "text": t}),
                        ContentPart::Image { image, media_type } => {
                            let b64 = base64::engine::general_purpose::STANDARD.encode(image.to_png());
                            json!({
                                "type": "image_url",
                                "image_url": {"url": format!("data:{media_type};base64,{b64}")}
                            })
                        }
                    })
                    .collect();
                json!({"role": role, "content": content})
            })
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if request.want_logprobs {
            body["logprobs"] = json!(true);
        }
        body
    }

    fn attempt(&self, body: &Value, want_logprobs: bool) -> Result<Completion, Attempt> {
        let mut req = self.client.post(self.endpoint()).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Transient(e.to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(Attempt::Transient(format!("HTTP {status}: {text}")));
        }
        if status.is_client_error() {
            if want_logprobs && text.to_ascii_lowercase().contains("logprob") {
                return Err(Attempt::Fatal(GatewayError::LogprobsUnavailable));
            }
            return Err(Attempt::Fatal(GatewayError::ProviderRejected { status: status.as_u16(), body: text }));
        }
        let parsed: ChatResponse = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(GatewayError::InvalidResponse(e.to_string())))?;
        parsed.into_completion(want_logprobs).map_err(Attempt::Fatal)
    }
}

enum Attempt {
    Transient(String),
    Fatal(GatewayError),
}

impl ChatBackend for OpenAiBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let body = self.body(request);
        let retry = &self.config.retry;
        let mut last = String::new();
        for attempt in 0..=retry.max_retries {
            if attempt > 0 {
                let wait = retry.backoff(attempt - 1);
                debug!(attempt, ?wait, "retrying chat completion");
                thread::sleep(wait);
            }
            match self.attempt(&body, request.want_logprobs) {
                Ok(c) => return Ok(c),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(msg)) => {
                    warn!(attempt, error = %msg, tag = ?request.tag, "transient model failure");
                    last = msg;
                }
            }
        }
        Err(GatewayError::Transport { attempts: retry.max_retries + 1, message: last })
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    model: String,
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<RespUsage>,
}

#[derive(Deserialize)]
struct Choice {
    message: RespMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct RespMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenEntry>>,
}

#[derive(Deserialize)]
struct TokenEntry {
    token: String,
    logprob: f64,
    #[serde(default)]
    bytes: Option<Vec<u8>>,
}

#[derive(Deserialize)]
struct RespUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl ChatResponse {
    fn into_completion(self, want_logprobs: bool) -> Result<Completion, GatewayError> {
        let choice = self
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::InvalidResponse("no choices".into()))?;
        let text = choice.message.content.unwrap_or_default();
        let usage = self
            .usage
            .map(|u| Usage { prompt_tokens: u.prompt_tokens, completion_tokens: u.completion_tokens })
            .unwrap_or_default();
        let mut tokens = Vec::new();
        if want_logprobs {
            let entries = choice
                .logprobs
                .and_then(|l| l.content)
                .ok_or(GatewayError::LogprobsUnavailable)?;
            let mut offset = 0usize;
            let mut spelled = Vec::with_capacity(text.len());
            for e in entries {
                let bytes = e.bytes.unwrap_or_else(|| e.token.clone().into_bytes());
                tokens.push(CompletionToken {
                    text: String::from_utf8_lossy(&bytes).into_owned(),
                    logprob: e.logprob.min(0.0),
                    byte_offset: offset,
                });
                offset += bytes.len();
                spelled.extend_from_slice(&bytes);
            }
            // Misaligned tokenization makes byte spans meaningless.
            if spelled != text.as_bytes() {
                return Err(GatewayError::LogprobsUnavailable);
            }
        }
        Ok(Completion { text, tokens, model_id: self.model, usage })
    }
}

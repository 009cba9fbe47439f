//! Chat-completion interface shared by every model-backed role.
//!
//! Requests carry text and screenshot parts; completions carry the reply text and,
//! when asked for, one logprob per generated token with its byte offset in the
//! reply.

mod openai;
mod scripted;

pub use openai::{OpenAiBackend, OpenAiConfig, RetryPolicy};
pub use scripted::{ScriptEntry, ScriptedBackend};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::Screenshot;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("provider rejected the request ({status}): {body}")]
    ProviderRejected { status: u16, body: String },
    #[error("provider cannot return token logprobs")]
    LogprobsUnavailable,
    #[error("malformed provider response: {0}")]
    InvalidResponse(String),
    #[error("script exhausted")]
    ScriptExhausted,
    #[error("no script entry matches request (last user text: {0:?})")]
    ScriptMismatch(String),
    #[error("invalid script entry {index}: {reason}")]
    InvalidScript { index: usize, reason: String },
    #[error("backend not configured: {0}")]
    NotConfigured(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone)]
pub enum ContentPart {
    Text(String),
    /// Raster plus the media type it is encoded as on the wire.
    Image { image: Screenshot, media_type: &'static str },
}

impl ContentPart {
    pub fn image(image: Screenshot) -> Self {
        ContentPart::Image { image, media_type: "image/png" }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            ContentPart::Text(t) => Some(t),
            ContentPart::Image { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> Self {
        Self { role, parts: vec![ContentPart::Text(text.into())] }
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, ContentPart::Image { .. })).count()
    }
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub want_logprobs: bool,
    pub max_tokens: u32,
    /// Caller label (e.g. `operator`) for logging and routing; never sent to a provider.
    pub tag: Option<String>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self { messages, temperature: 0.0, want_logprobs: false, max_tokens: 1024, tag: None }
    }

    pub fn with_logprobs(mut self, want: bool) -> Self {
        self.want_logprobs = want;
        self
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = Some(tag.into());
        self
    }

    /// Text of the last text part of the last user message.
    pub fn last_user_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .and_then(|m| m.parts.iter().rev().find_map(ContentPart::as_text))
    }

    pub fn image_count(&self) -> usize {
        self.messages.iter().map(ChatMessage::image_count).sum()
    }

    /// All text parts joined with newlines, for diagnostics and tests.
    pub fn full_text(&self) -> String {
        self.messages
            .iter()
            .flat_map(|m| m.parts.iter().filter_map(ContentPart::as_text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionToken {
    pub text: String,
    pub logprob: f64,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub tokens: Vec<CompletionToken>,
    pub model_id: String,
    pub usage: Usage,
}

impl Completion {
    /// Lays `(text, logprob)` pairs end to end, checking they spell `text`.
    pub fn with_token_logprobs(
        text: String,
        pairs: &[(String, f64)],
        model_id: impl Into<String>,
    ) -> Result<Self, String> {
        let mut tokens = Vec::with_capacity(pairs.len());
        let mut offset = 0;
        for (tok, logprob) in pairs {
            if !text[offset..].starts_with(tok.as_str()) {
                return Err(format!("token {tok:?} does not continue the text at byte {offset}"));
            }
            tokens.push(CompletionToken { text: tok.clone(), logprob: *logprob, byte_offset: offset });
            offset += tok.len();
        }
        if offset != text.len() {
            return Err(format!("tokens cover {offset} of {} bytes", text.len()));
        }
        let usage = Usage { prompt_tokens: 0, completion_tokens: tokens.len() as u64 };
        Ok(Self { text, tokens, model_id: model_id.into(), usage })
    }
}

/// Something that answers chat requests.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError>;

    fn model_id(&self) -> &str;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        (**self).complete(request)
    }

    fn model_id(&self) -> &str {
        (**self).model_id()
    }
}

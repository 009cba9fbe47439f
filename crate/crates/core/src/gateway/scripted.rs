//! Deterministic backend replaying a queue of canned replies.

use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{ChatBackend, ChatRequest, Completion, GatewayError, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// Substring the last user text must contain; `None` matches anything.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matcher: Option<String>,
    pub reply: String,
    /// Per-token logprobs whose texts concatenate to `reply`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<(String, f64)>>,
}

impl ScriptEntry {
    pub fn reply(reply: impl Into<String>) -> Self {
        Self { matcher: None, reply: reply.into(), token_logprobs: None }
    }

    pub fn matching(mut self, matcher: impl Into<String>) -> Self {
        self.matcher = Some(matcher.into());
        self
    }

    pub fn with_logprobs(mut self, tokens: Vec<(String, f64)>) -> Self {
        self.token_logprobs = Some(tokens);
        self
    }

    /// Whole reply as one token with the given logprob.
    pub fn with_uniform_logprob(self, logprob: f64) -> Self {
        let reply = self.reply.clone();
        self.with_logprobs(vec![(reply, logprob)])
    }
}

pub struct ScriptedBackend {
    entries: Mutex<Vec<Option<ScriptEntry>>>,
    model_id: String,
}

impl ScriptedBackend {
    pub fn load(script: Vec<ScriptEntry>) -> Result<Self, GatewayError> {
        for (index, entry) in script.iter().enumerate() {
            if let Some(tokens) = &entry.token_logprobs {
                let joined: String = tokens.iter().map(|(t, _)| t.as_str()).collect();
                if joined != entry.reply {
                    return Err(GatewayError::InvalidScript {
                        index,
                        reason: "token texts do not concatenate to the reply".into(),
                    });
                }
                if let Some((_, lp)) = tokens.iter().find(|(_, lp)| *lp > 0.0 || lp.is_nan()) {
                    return Err(GatewayError::InvalidScript {
                        index,
                        reason: format!("logprob {lp} is not <= 0"),
                    });
                }
            }
        }
        Ok(Self {
            entries: Mutex::new(script.into_iter().map(Some).collect()),
            model_id: "scripted".into(),
        })
    }

    /// Loads a JSON array of entries.
    pub fn from_file(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::NotConfigured(format!("{}: {e}", path.display())))?;
        let script: Vec<ScriptEntry> = serde_json::from_str(&text)
            .map_err(|e| GatewayError::NotConfigured(format!("{}: {e}", path.display())))?;
        Self::load(script)
    }

    pub fn remaining(&self) -> usize {
        self.entries.lock().unwrap().iter().flatten().count()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let mut entries = self.entries.lock().unwrap();
        let last = request.last_user_text().unwrap_or("");
        let mut any_left = false;
        let slot = entries.iter_mut().find(|slot| match slot {
            Some(e) => {
                any_left = true;
                e.matcher.as_deref().is_none_or(|m| last.contains(m))
            }
            None => false,
        });
        let Some(slot) = slot else {
            return Err(if any_left {
                GatewayError::ScriptMismatch(last.chars().take(200).collect())
            } else {
                GatewayError::ScriptExhausted
            });
        };
        let entry = slot.as_ref().expect("matched slot is occupied");
        if request.want_logprobs && entry.token_logprobs.is_none() {
            // Left in place so the caller can retry without logprobs.
            return Err(GatewayError::LogprobsUnavailable);
        }
        let entry = slot.take().expect("matched slot is occupied");
        match entry.token_logprobs {
            Some(tokens) if request.want_logprobs => {
                Completion::with_token_logprobs(entry.reply, &tokens, &self.model_id)
                    .map_err(GatewayError::InvalidResponse)
            }
            _ => Ok(Completion {
                text: entry.reply,
                tokens: Vec::new(),
                model_id: self.model_id.clone(),
                usage: Usage::default(),
            }),
        }
    }

    fn model_id(&self) -> &str {
        &self.model_id
    }
}

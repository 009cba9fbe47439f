//! Shared vocabulary: instructions, actions, screenshots, reflections, progress
//! and run results.

mod action;
mod screenshot;

pub use action::{
    action_equals, validate_action, Action, ActionError, ActionType, Point, SystemButton,
    TerminateStatus,
};
pub use screenshot::{Rgb, Screenshot, ScreenshotError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DomainError {
    #[error("instruction text is empty")]
    EmptyInstruction,
    #[error("{0}")]
    InvalidReflection(&'static str),
    #[error("step {step} already has a {level:?} reflection")]
    DuplicateReflection { step: usize, level: ReflectionLevel },
    #[error("logprob {0} is positive")]
    PositiveLogprob(f64),
    #[error("confidence needs at least one token")]
    NoTokens,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    app_hint: Option<String>,
}

impl Instruction {
    pub fn new(text: impl Into<String>) -> Result<Self, DomainError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(DomainError::EmptyInstruction);
        }
        Ok(Self { text, app_hint: None })
    }

    pub fn with_app_hint(mut self, hint: impl Into<String>) -> Self {
        let hint = hint.into();
        self.app_hint = (!hint.trim().is_empty()).then_some(hint);
        self
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn app_hint(&self) -> Option<&str> {
        self.app_hint.as_deref()
    }
}

/// The operator's full output for one step: reasoning, the structured action
/// and a one-sentence rendering of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOutput {
    pub thought: String,
    pub action: Action,
    pub description: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReflectionLevel {
    Action,
    Trajectory,
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Error,
    Incomplete,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Ok => "OK",
            Verdict::Error => "ERROR",
            Verdict::Incomplete => "INCOMPLETE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectionFeedback {
    pub level: ReflectionLevel,
    pub verdict: Verdict,
    pub explanation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggestion: Option<String>,
    pub step_index: usize,
}

impl ReflectionFeedback {
    pub fn new(
        level: ReflectionLevel,
        verdict: Verdict,
        explanation: impl Into<String>,
        suggestion: Option<String>,
        step_index: usize,
    ) -> Result<Self, DomainError> {
        let explanation = explanation.into();
        if level == ReflectionLevel::Global && verdict == Verdict::Error {
            return Err(DomainError::InvalidReflection(
                "global reflections are either ok or incomplete",
            ));
        }
        if verdict != Verdict::Ok && explanation.trim().is_empty() {
            return Err(DomainError::InvalidReflection("a negative verdict needs an explanation"));
        }
        Ok(Self { level, verdict, explanation, suggestion, step_index })
    }

    pub fn ok(level: ReflectionLevel, step_index: usize) -> Self {
        Self { level, verdict: Verdict::Ok, explanation: String::new(), suggestion: None, step_index }
    }

    pub fn is_negative(&self) -> bool {
        self.verdict != Verdict::Ok
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub summary: String,
    pub noted_facts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub text: String,
    pub logprob: f64,
}

/// Mean natural-log probability of the tokens that spell the action type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceScore {
    value: f64,
    tokens: Vec<TokenLogprob>,
}

impl ConfidenceScore {
    pub fn from_tokens(tokens: Vec<TokenLogprob>) -> Result<Self, DomainError> {
        if tokens.is_empty() {
            return Err(DomainError::NoTokens);
        }
        if let Some(t) = tokens.iter().find(|t| t.logprob > 0.0 || t.logprob.is_nan()) {
            return Err(DomainError::PositiveLogprob(t.logprob));
        }
        let sum: f64 = tokens.iter().map(|t| t.logprob).sum();
        let value = sum / tokens.len() as f64;
        Ok(Self { value, tokens })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }

    pub fn tokens(&self) -> &[TokenLogprob] {
        &self.tokens
    }
}

/// Everything observed and produced at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub index: usize,
    pub screenshot_before: Screenshot,
    pub action_output: ActionOutput,
    pub confidence: Option<ConfidenceScore>,
    /// `None` only when a terminate was intercepted and nothing ran on the device.
    pub screenshot_after: Option<Screenshot>,
    reflections: Vec<ReflectionFeedback>,
    pub progress_after: Progress,
}

impl StepRecord {
    pub fn new(
        index: usize,
        screenshot_before: Screenshot,
        action_output: ActionOutput,
        confidence: Option<ConfidenceScore>,
        screenshot_after: Option<Screenshot>,
    ) -> Self {
        Self {
            index,
            screenshot_before,
            action_output,
            confidence,
            screenshot_after,
            reflections: Vec::new(),
            progress_after: Progress::default(),
        }
    }

    pub fn add_reflection(&mut self, feedback: ReflectionFeedback) -> Result<(), DomainError> {
        if self.reflection(feedback.level).is_some() {
            return Err(DomainError::DuplicateReflection { step: self.index, level: feedback.level });
        }
        self.reflections.push(feedback);
        self.reflections.sort_by_key(|r| r.level);
        Ok(())
    }

    pub fn reflections(&self) -> &[ReflectionFeedback] {
        &self.reflections
    }

    pub fn reflection(&self, level: ReflectionLevel) -> Option<&ReflectionFeedback> {
        self.reflections.iter().find(|r| r.level == level)
    }

    pub fn action(&self) -> &Action {
        &self.action_output.action
    }

    /// The screen after this step; an intercepted terminate left it unchanged.
    pub fn effective_after(&self) -> &Screenshot {
        self.screenshot_after.as_ref().unwrap_or(&self.screenshot_before)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Success,
    Failure,
    Aborted,
    MaxStepsExceeded,
}

impl RunStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RunStatus::Success => "success",
            RunStatus::Failure => "failure",
            RunStatus::Aborted => "aborted",
            RunStatus::MaxStepsExceeded => "max_steps_exceeded",
        }
    }
}

/// Failure categories used to label unsuccessful runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureType {
    /// Wrong, insufficient or prematurely terminated action sequence.
    Planning,
    /// Could not find an element or function.
    Navigation,
    /// Could not manipulate an element.
    Interaction,
    /// Misread on-screen text or an icon's meaning.
    Perception,
    /// Wrong coordinates for the intended target.
    Grounding,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub status: RunStatus,
    pub steps: Vec<StepRecord>,
    pub answer: Option<String>,
    pub failure_label: Option<FailureType>,
}

impl RunResult {
    pub fn reflection_count(&self, level: ReflectionLevel) -> usize {
        self.steps.iter().filter(|s| s.reflection(level).is_some()).count()
    }
}

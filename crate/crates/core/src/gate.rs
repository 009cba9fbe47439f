//! Deterministic decisions about when each reflector runs.
//!
//! The action reflector is gated on the operator's confidence in the action
//! type it chose; the trajectory reflector fires on repetition or accumulated
//! errors; the global reflector sees a short window of recent screenshots.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{
    action_equals, ConfidenceScore, ReflectionLevel, StepRecord, TokenLogprob, Verdict,
};
use crate::gateway::Completion;
use crate::perception::changed_fraction;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GateError {
    #[error("no completion token overlaps bytes {0:?}")]
    NoTokenOverlap(Range<usize>),
    #[error("invalid gate config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateConfig {
    /// Reflect on an action when its confidence is at or below this.
    #[serde(with = "theta_serde")]
    pub theta: f64,
    pub trajectory_window: usize,
    pub repeat_action_count: usize,
    pub repeat_screen_count: usize,
    /// Two screens with `changed_fraction` at or below this count as the same.
    pub screen_same_threshold: f64,
    pub accumulated_error_count: usize,
}

/// JSON has no infinities, so non-finite thresholds travel as strings such
/// as `"-inf"`. Either form is accepted on input.
mod theta_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.trim().parse().map_err(serde::de::Error::custom),
        }
    }
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            theta: -0.001,
            trajectory_window: 5,
            repeat_action_count: 3,
            repeat_screen_count: 3,
            screen_same_threshold: 0.001,
            accumulated_error_count: 2,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<(), GateError> {
        let bad = |m: String| Err(GateError::InvalidConfig(m));
        if self.theta.is_nan() || self.theta > 0.0 {
            return bad(format!("theta must be <= 0, got {}", self.theta));
        }
        for (name, n) in [
            ("repeat_action_count", self.repeat_action_count),
            ("repeat_screen_count", self.repeat_screen_count),
            ("accumulated_error_count", self.accumulated_error_count),
        ] {
            if n < 2 {
                return bad(format!("{name} must be >= 2, got {n}"));
            }
            if self.trajectory_window < n {
                return bad(format!(
                    "trajectory_window ({}) must be >= {name} ({n})",
                    self.trajectory_window
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.screen_same_threshold) {
            return bad(format!("screen_same_threshold must lie in [0, 1], got {}", self.screen_same_threshold));
        }
        Ok(())
    }
}

/// Mean logprob of the completion tokens overlapping `span`, normally the
/// bytes of the serialized action type.
pub fn compute_confidence(
    completion: &Completion,
    span: Range<usize>,
) -> Result<ConfidenceScore, GateError> {
    if span.is_empty() {
        return Err(GateError::NoTokenOverlap(span));
    }
    let tokens: Vec<TokenLogprob> = completion
        .tokens
        .iter()
        .filter(|t| t.byte_offset < span.end && t.byte_offset + t.text.len() > span.start)
        .map(|t| TokenLogprob { text: t.text.clone(), logprob: t.logprob })
        .collect();
    ConfidenceScore::from_tokens(tokens).map_err(|_| GateError::NoTokenOverlap(span))
}

/// Reflect iff confidence is at or below θ; always reflect without a score.
pub fn should_reflect_action(confidence: Option<&ConfidenceScore>, config: &GateConfig) -> bool {
    match confidence {
        Some(c) => c.value() <= config.theta,
        None => true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    RepeatedActions,
    RepeatedScreens,
    AccumulatedErrors,
}

/// Evaluates the three trajectory triggers on the tail of `steps`.
pub fn should_reflect_trajectory(steps: &[StepRecord], config: &GateConfig) -> (bool, Vec<Trigger>) {
    let mut fired = Vec::new();

    if let Some(tail) = last_n(steps, config.repeat_action_count) {
        if all_pairs(tail, |a, b| action_equals(a.action(), b.action())) {
            fired.push(Trigger::RepeatedActions);
        }
    }

    if let Some(tail) = last_n(steps, config.repeat_screen_count) {
        let same = |a: &StepRecord, b: &StepRecord| {
            changed_fraction(a.effective_after(), b.effective_after())
                .is_ok_and(|f| f <= config.screen_same_threshold)
        };
        if all_pairs(tail, same) {
            fired.push(Trigger::RepeatedScreens);
        }
    }

    let window = &steps[steps.len().saturating_sub(config.trajectory_window)..];
    let errors = window
        .iter()
        .filter(|s| s.reflection(ReflectionLevel::Action).is_some_and(|r| r.verdict == Verdict::Error))
        .count();
    if errors >= config.accumulated_error_count {
        fired.push(Trigger::AccumulatedErrors);
    }

    (!fired.is_empty(), fired)
}

fn last_n(steps: &[StepRecord], n: usize) -> Option<&[StepRecord]> {
    (n > 0 && steps.len() >= n).then(|| &steps[steps.len() - n..])
}

fn all_pairs(items: &[StepRecord], same: impl Fn(&StepRecord, &StepRecord) -> bool) -> bool {
    items
        .iter()
        .enumerate()
        .all(|(i, a)| items[i + 1..].iter().all(|b| same(a, b)))
}

/// First step whose screenshot the global reflector sees when terminating at `t`.
pub fn global_window_start(t: usize) -> usize {
    t.saturating_sub(3)
}

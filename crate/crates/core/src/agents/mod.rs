//! Prompt assembly and reply parsing for every model-backed role.
//!
//! Each role renders its template, calls the gateway once (the operator may
//! retry once after a parse failure) and parses the line-tagged reply.
//! Reflector replies that cannot be parsed fail open to `OK`.

mod parse;
mod template;

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use thiserror::Error;

pub use parse::{
    action_type_span, parse_operator, parse_reflection, parse_summary, tagged_text,
    ParsedOperator, ParsedReflection, SummaryBullet,
};
pub use template::{AgentRole, PromptTemplate, TemplateCatalog, TemplateError};

use crate::domain::{
    Action, ActionOutput, ConfidenceScore, Instruction, Progress, ReflectionFeedback,
    ReflectionLevel, Screenshot, StepRecord, Verdict,
};
use crate::gate::{compute_confidence, Trigger};
use crate::gateway::{ChatBackend, ChatMessage, ChatRequest, Completion, GatewayError, Role};
use crate::knowledge::{KnowledgeItem, KnowledgeSource};
use crate::perception::BoundingBox;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("{role} reply unparseable after retry: {reason}")]
    Unparseable { role: &'static str, reason: String, reply: String },
    #[error("{0}")]
    Precondition(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentLimits {
    pub max_history_actions: usize,
    pub max_images_per_call: usize,
    pub max_images_global: usize,
}

impl Default for AgentLimits {
    fn default() -> Self {
        Self { max_history_actions: 10, max_images_per_call: 2, max_images_global: 4 }
    }
}

/// The previous step's reflections as handed to the operator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FeedbackBundle {
    pub action: Option<ReflectionFeedback>,
    pub trajectory: Option<ReflectionFeedback>,
    pub global: Option<ReflectionFeedback>,
}

impl FeedbackBundle {
    pub fn from_step(step: &StepRecord) -> Self {
        Self {
            action: step.reflection(ReflectionLevel::Action).cloned(),
            trajectory: step.reflection(ReflectionLevel::Trajectory).cloned(),
            global: step.reflection(ReflectionLevel::Global).cloned(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.action.is_none() && self.trajectory.is_none() && self.global.is_none()
    }

    /// Action, trajectory, then global; `(none)` when empty.
    pub fn render(&self) -> String {
        let lines: Vec<String> = [&self.action, &self.trajectory, &self.global]
            .into_iter()
            .flatten()
            .map(render_feedback)
            .collect();
        if lines.is_empty() {
            "(none)".into()
        } else {
            lines.join("\n")
        }
    }
}

fn level_name(level: ReflectionLevel) -> &'static str {
    match level {
        ReflectionLevel::Action => "Action check",
        ReflectionLevel::Trajectory => "Trajectory check",
        ReflectionLevel::Global => "Completion check",
    }
}

pub fn render_feedback(f: &ReflectionFeedback) -> String {
    let mut s = format!("{}: {}", level_name(f.level), f.verdict.as_str());
    if !f.explanation.is_empty() {
        s.push_str(". ");
        s.push_str(&f.explanation);
    }
    if let Some(sug) = &f.suggestion {
        s.push_str(" Suggestion: ");
        s.push_str(sug);
    }
    s
}

fn render_action(output: &ActionOutput) -> String {
    format!("{} {}", output.description, output.action.to_canonical())
}

/// The last `limit` steps, one line each plus any reflections.
pub fn render_history(steps: &[StepRecord], limit: usize) -> String {
    if steps.is_empty() {
        return "(none)".into();
    }
    let skip = steps.len().saturating_sub(limit);
    let mut out = Vec::new();
    if skip > 0 {
        out.push(format!("({skip} earlier step(s) omitted; see progress)"));
    }
    for s in &steps[skip..] {
        out.push(format!("Step {}: {}", s.index, render_action(&s.action_output)));
        for r in s.reflections() {
            out.push(format!("  {}", render_feedback(r)));
        }
    }
    out.join("\n")
}

pub fn render_progress(p: &Progress) -> String {
    let mut out = Vec::new();
    out.push(if p.summary.trim().is_empty() { "(nothing yet)".to_string() } else { p.summary.clone() });
    if !p.noted_facts.is_empty() {
        out.push("Noted facts:".into());
        out.extend(p.noted_facts.iter().map(|f| format!("- {f}")));
    }
    if let Some(a) = &p.answer {
        out.push(format!("Answer given: {a}"));
    }
    out.join("\n")
}

/// Items in the given order, verbatim.
pub fn render_knowledge(items: &[KnowledgeItem]) -> String {
    if items.is_empty() {
        return "(none)".into();
    }
    items.iter().map(|i| format!("- [{}] {}", i.app, i.text)).collect::<Vec<_>>().join("\n")
}

fn render_regions(boxes: &[BoundingBox]) -> String {
    if boxes.is_empty() {
        return "(no visible change)".into();
    }
    boxes
        .iter()
        .map(|b| format!("- x={} y={} width={} height={}", b.x, b.y, b.width, b.height))
        .collect::<Vec<_>>()
        .join("\n")
}

/// What the operator produced for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorOutcome {
    pub output: ActionOutput,
    pub confidence: Option<ConfidenceScore>,
    pub warnings: Vec<String>,
}

pub struct OperatorInput<'a> {
    pub instruction: &'a Instruction,
    pub knowledge: &'a [KnowledgeItem],
    pub screenshot: &'a Screenshot,
    pub history: &'a [StepRecord],
    pub feedback: &'a FeedbackBundle,
    pub progress: &'a Progress,
}

pub struct ExplorerInput<'a> {
    pub app: &'a str,
    pub guidance: &'a str,
    pub knowledge: &'a [KnowledgeItem],
    pub screenshot: &'a Screenshot,
    pub history: &'a [StepRecord],
}

pub struct TrajectoryInput<'a> {
    pub instruction: &'a Instruction,
    pub progress: &'a Progress,
    /// Recent steps, oldest first.
    pub window: &'a [StepRecord],
    pub triggers: &'a [Trigger],
    pub step_index: usize,
}

pub struct GlobalInput<'a> {
    pub instruction: &'a Instruction,
    pub progress: &'a Progress,
    pub history: &'a [StepRecord],
    /// `(step index, screenshot)` pairs from the window start to now.
    pub screenshots: &'a [(usize, Screenshot)],
    pub step_index: usize,
}

/// Result of an advisory role plus any warning about its reply.
#[derive(Debug, Clone, PartialEq)]
pub struct Advisory<T> {
    pub value: T,
    pub warning: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct Agents {
    catalog: TemplateCatalog,
    limits: AgentLimits,
}

impl Agents {
    pub fn new(catalog: TemplateCatalog, limits: AgentLimits) -> Self {
        Self { catalog, limits }
    }

    /// Built-in templates, overridden from `dir` when given.
    pub fn from_template_dir(dir: Option<&std::path::Path>) -> Result<Self, TemplateError> {
        let catalog = match dir {
            Some(d) => TemplateCatalog::with_overrides(d)?,
            None => TemplateCatalog::builtin(),
        };
        Ok(Self::new(catalog, AgentLimits::default()))
    }

    pub fn limits(&self) -> &AgentLimits {
        &self.limits
    }

    fn request(&self, role: AgentRole, slots: BTreeMap<&str, String>, images: &[Screenshot]) -> ChatRequest {
        let max = if role == AgentRole::GlobalReflector {
            self.limits.max_images_global
        } else {
            self.limits.max_images_per_call
        };
        let images = &images[images.len().saturating_sub(max)..];
        ChatRequest::new(self.catalog.get(role).render(&slots, images)).with_tag(role.name())
    }

    /// Calls `gateway`, falling back to a plain call when logprobs are unavailable.
    fn call_with_logprobs(
        &self,
        gateway: &dyn ChatBackend,
        request: &ChatRequest,
        warnings: &mut Vec<String>,
    ) -> Result<Completion, GatewayError> {
        match gateway.complete(&request.clone().with_logprobs(true)) {
            Err(GatewayError::LogprobsUnavailable) => {
                warnings.push("logprobs unavailable; confidence gate will always reflect".into());
                gateway.complete(&request.clone().with_logprobs(false))
            }
            other => other,
        }
    }

    fn decide(
        &self,
        gateway: &dyn ChatBackend,
        role: AgentRole,
        request: ChatRequest,
    ) -> Result<OperatorOutcome, AgentError> {
        let mut warnings = Vec::new();
        let mut request = request;
        let mut completion = self.call_with_logprobs(gateway, &request, &mut warnings)?;
        let parsed = match parse_operator(&completion.text) {
            Ok(p) => p,
            Err(reason) => {
                warnings.push(format!("{} reply unparseable, retrying: {reason}", role.name()));
                request.messages.push(ChatMessage::text(Role::Assistant, completion.text.clone()));
                request.messages.push(ChatMessage::text(
                    Role::User,
                    format!(
                        "[role: {}]\nYour reply could not be parsed ({reason}). Reply again with exactly \
                         three lines: `Thought: ...`, `Action: <one JSON object>`, `Description: ...`.",
                        role.name()
                    ),
                ));
                completion = self.call_with_logprobs(gateway, &request, &mut warnings)?;
                parse_operator(&completion.text).map_err(|reason| AgentError::Unparseable {
                    role: role.name(),
                    reason,
                    reply: completion.text.clone(),
                })?
            }
        };
        let confidence = if completion.tokens.is_empty() {
            None
        } else {
            match compute_confidence(&completion, parsed.action_type_span.clone()) {
                Ok(c) => Some(c),
                Err(e) => {
                    warnings.push(format!("confidence unavailable: {e}"));
                    None
                }
            }
        };
        Ok(OperatorOutcome { output: parsed.output, confidence, warnings })
    }

    pub fn run_operator(&self, gateway: &dyn ChatBackend, input: &OperatorInput<'_>) -> Result<OperatorOutcome, AgentError> {
        let s = input.screenshot;
        let slots = BTreeMap::from([
            ("instruction", input.instruction.text().to_string()),
            ("knowledge", render_knowledge(input.knowledge)),
            ("progress", render_progress(input.progress)),
            ("history", render_history(input.history, self.limits.max_history_actions)),
            ("feedback", input.feedback.render()),
            ("screen", format!("{}x{}", s.width(), s.height())),
        ]);
        let req = self.request(AgentRole::Operator, slots, std::slice::from_ref(s));
        self.decide(gateway, AgentRole::Operator, req)
    }

    /// The operator acting under the exploration template; never sees a task.
    pub fn run_explorer(&self, gateway: &dyn ChatBackend, input: &ExplorerInput<'_>) -> Result<OperatorOutcome, AgentError> {
        let s = input.screenshot;
        let guidance = if input.guidance.trim().is_empty() { "(none)".to_string() } else { input.guidance.to_string() };
        let slots = BTreeMap::from([
            ("app", input.app.to_string()),
            ("guidance", guidance),
            ("knowledge", render_knowledge(input.knowledge)),
            ("history", render_history(input.history, self.limits.max_history_actions)),
            ("screen", format!("{}x{}", s.width(), s.height())),
        ]);
        let req = self.request(AgentRole::Explorer, slots, std::slice::from_ref(s));
        self.decide(gateway, AgentRole::Explorer, req)
    }

    /// Updated progress after `current`. Notes and answers are copied from
    /// the action itself; the model only writes the summary.
    pub fn run_progressor(
        &self,
        gateway: &dyn ChatBackend,
        instruction: &Instruction,
        history: &[StepRecord],
        previous: &Progress,
        current: &ActionOutput,
        feedback: &FeedbackBundle,
    ) -> Result<Progress, AgentError> {
        let slots = BTreeMap::from([
            ("instruction", instruction.text().to_string()),
            ("progress", render_progress(previous)),
            ("history", render_history(history, self.limits.max_history_actions)),
            ("action", render_action(current)),
            ("feedback", feedback.render()),
        ]);
        let reply = gateway.complete(&self.request(AgentRole::Progressor, slots, &[]))?;
        let mut progress = previous.clone();
        let summary = tagged_text(&reply.text, "Progress").unwrap_or_else(|| reply.text.trim().to_string());
        if !summary.is_empty() {
            progress.summary = summary;
        }
        match &current.action {
            Action::TakeNote { text } => progress.noted_facts.push(text.clone()),
            Action::Answer { text } => progress.answer = Some(text.clone()),
            _ => {}
        }
        Ok(progress)
    }

    pub fn run_action_reflector(
        &self,
        gateway: &dyn ChatBackend,
        instruction: &Instruction,
        before: &Screenshot,
        annotated_after: &Screenshot,
        regions: &[BoundingBox],
        action: &ActionOutput,
        step_index: usize,
    ) -> Result<Advisory<ReflectionFeedback>, AgentError> {
        let slots = BTreeMap::from([
            ("instruction", instruction.text().to_string()),
            ("action", render_action(action)),
            ("regions", render_regions(regions)),
        ]);
        let images = [before.clone(), annotated_after.clone()];
        let reply = gateway.complete(&self.request(AgentRole::ActionReflector, slots, &images))?;
        Ok(reflection_from_reply(&reply.text, ReflectionLevel::Action, step_index))
    }

    pub fn run_trajectory_reflector(
        &self,
        gateway: &dyn ChatBackend,
        input: &TrajectoryInput<'_>,
    ) -> Result<Advisory<ReflectionFeedback>, AgentError> {
        let window = input
            .window
            .iter()
            .map(|s| {
                let fb = s
                    .reflection(ReflectionLevel::Action)
                    .map(render_feedback)
                    .unwrap_or_else(|| "(no action-level feedback)".into());
                format!("Step {}: {}\n  {}", s.index, render_action(&s.action_output), fb)
            })
            .collect::<Vec<_>>()
            .join("\n");
        let triggers = input
            .triggers
            .iter()
            .map(|t| match t {
                Trigger::RepeatedActions => "the same action was repeated",
                Trigger::RepeatedScreens => "the screen stopped changing",
                Trigger::AccumulatedErrors => "several steps were judged wrong",
            })
            .collect::<Vec<_>>()
            .join("; ");
        let slots = BTreeMap::from([
            ("instruction", input.instruction.text().to_string()),
            ("progress", render_progress(input.progress)),
            ("triggers", if triggers.is_empty() { "(none)".into() } else { triggers }),
            ("window", if window.is_empty() { "(none)".into() } else { window }),
        ]);
        let reply = gateway.complete(&self.request(AgentRole::TrajectoryReflector, slots, &[]))?;
        Ok(reflection_from_reply(&reply.text, ReflectionLevel::Trajectory, input.step_index))
    }

    pub fn run_global_reflector(
        &self,
        gateway: &dyn ChatBackend,
        input: &GlobalInput<'_>,
    ) -> Result<Advisory<ReflectionFeedback>, AgentError> {
        let shown: Vec<String> = input.screenshots.iter().map(|(i, _)| format!("step {i}")).collect();
        let slots = BTreeMap::from([
            ("instruction", input.instruction.text().to_string()),
            ("progress", render_progress(input.progress)),
            ("history", render_history(input.history, self.limits.max_history_actions)),
            ("window", shown.join(", ")),
        ]);
        let images: Vec<Screenshot> = input.screenshots.iter().map(|(_, s)| s.clone()).collect();
        let reply = gateway.complete(&self.request(AgentRole::GlobalReflector, slots, &images))?;
        Ok(reflection_from_reply(&reply.text, ReflectionLevel::Global, input.step_index))
    }

    /// Knowledge distilled from an exploration segment of at least two steps.
    pub fn run_summary_agent(
        &self,
        gateway: &dyn ChatBackend,
        app: &str,
        segment: &[StepRecord],
        source: KnowledgeSource,
        created_at: DateTime<Utc>,
    ) -> Result<Advisory<Vec<KnowledgeItem>>, AgentError> {
        if segment.len() < 2 {
            return Err(AgentError::Precondition(format!(
                "summary needs a segment of at least 2 steps, got {}",
                segment.len()
            )));
        }
        let steps = segment
            .iter()
            .map(|s| format!("Step {}: {}", s.index, render_action(&s.action_output)))
            .collect::<Vec<_>>()
            .join("\n");
        let first = segment[0].screenshot_before.clone();
        let last = segment[segment.len() - 1].effective_after().clone();
        let slots = BTreeMap::from([("app", app.to_string()), ("segment", steps)]);
        let reply = gateway.complete(&self.request(AgentRole::Summary, slots, &[first, last]))?;
        Ok(match parse_summary(&reply.text) {
            Some(bullets) => Advisory {
                value: bullets
                    .into_iter()
                    .map(|b| KnowledgeItem::new(app, b.text, b.tags, source.clone(), created_at))
                    .collect(),
                warning: None,
            },
            None => Advisory { value: Vec::new(), warning: Some("summary reply had no bullet items".into()) },
        })
    }

    /// Guidance for the next exploration step; empty when the reply is.
    pub fn run_critic_agent(
        &self,
        gateway: &dyn ChatBackend,
        app: &str,
        screen: &Screenshot,
        knowledge: &[KnowledgeItem],
        history: &[StepRecord],
    ) -> Result<String, AgentError> {
        let slots = BTreeMap::from([
            ("app", app.to_string()),
            ("knowledge", render_knowledge(knowledge)),
            ("history", render_history(history, self.limits.max_history_actions)),
        ]);
        let reply = gateway.complete(&self.request(AgentRole::Critic, slots, std::slice::from_ref(screen)))?;
        Ok(tagged_text(&reply.text, "GUIDANCE").unwrap_or_else(|| reply.text.trim().to_string()))
    }
}

/// Parses a reflector reply, coercing verdicts to the level's allowed set.
/// Replies without a verdict fail open to OK with a warning.
pub fn reflection_from_reply(reply: &str, level: ReflectionLevel, step_index: usize) -> Advisory<ReflectionFeedback> {
    let Some(parsed) = parse_reflection(reply) else {
        return Advisory {
            value: ReflectionFeedback::ok(level, step_index),
            warning: Some(format!("{} reply had no verdict; treated as OK", level_name(level).to_lowercase())),
        };
    };
    let verdict = match (level, parsed.verdict) {
        (_, Verdict::Ok) => Verdict::Ok,
        (ReflectionLevel::Global, _) => Verdict::Incomplete,
        (_, _) => Verdict::Error,
    };
    if verdict == Verdict::Ok {
        let mut fb = ReflectionFeedback::ok(level, step_index);
        fb.explanation = parsed.explanation;
        return Advisory { value: fb, warning: None };
    }
    let explanation = if parsed.explanation.trim().is_empty() {
        parsed.suggestion.clone().unwrap_or_else(|| "(no explanation given)".into())
    } else {
        parsed.explanation
    };
    let fb = ReflectionFeedback::new(level, verdict, explanation, parsed.suggestion, step_index)
        .expect("verdict coerced and explanation non-empty");
    Advisory { value: fb, warning: None }
}

//! Instruction-free app exploration that distils knowledge items.
//!
//! Each episode opens the app and lets the explorer act. Every
//! `summary_stride` executed steps, and once more at the end, the summary
//! agent turns the latest segment into knowledge. After every step that does
//! not end the episode the critic suggests what to try next.

use std::path::PathBuf;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{AgentError, Agents, ExplorerInput};
use crate::device::{Device, ExecReport};
use crate::domain::{Action, RunStatus, StepRecord};
use crate::gateway::ChatBackend;
use crate::knowledge::{KnowledgeSource, KnowledgeStore};
use crate::orchestrator::{Recorder, ReflectorToggles, RunEvent, TraceWriter};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplorationConfig {
    pub apps: Vec<String>,
    pub episodes_per_app: usize,
    pub max_steps_per_episode: usize,
    pub summary_stride: usize,
    /// Consecutive `no_effect` executions that end an episode.
    pub no_effect_limit: usize,
    pub trace_dir: Option<PathBuf>,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self {
            apps: Vec::new(),
            episodes_per_app: 3,
            max_steps_per_episode: 15,
            summary_stride: 5,
            no_effect_limit: 3,
            trace_dir: None,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExplorationError {
    #[error("exploration needs at least one app")]
    NoApps,
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<(), ExplorationError> {
        if self.apps.iter().all(|a| a.trim().is_empty()) {
            return Err(ExplorationError::NoApps);
        }
        for (name, v) in [
            ("episodes_per_app", self.episodes_per_app),
            ("max_steps_per_episode", self.max_steps_per_episode),
            ("summary_stride", self.summary_stride),
            ("no_effect_limit", self.no_effect_limit),
        ] {
            if v == 0 {
                return Err(ExplorationError::ZeroCount(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EpisodeEnd {
    Terminated,
    StepCap,
    NoEffect,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub app: String,
    /// 1-based within the app.
    pub episode: usize,
    pub id: String,
    pub steps: usize,
    pub items_added: usize,
    pub end: EpisodeEnd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AppTotals {
    pub app: String,
    pub episodes: usize,
    pub aborted: usize,
    pub steps: usize,
    pub items_added: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExplorationReport {
    pub episodes: Vec<EpisodeReport>,
}

impl ExplorationReport {
    pub fn totals(&self) -> Vec<AppTotals> {
        let mut out: Vec<AppTotals> = Vec::new();
        for e in &self.episodes {
            let idx = match out.iter().position(|t| t.app == e.app) {
                Some(i) => i,
                None => {
                    out.push(AppTotals { app: e.app.clone(), ..AppTotals::default() });
                    out.len() - 1
                }
            };
            let t = &mut out[idx];
            t.episodes += 1;
            t.aborted += usize::from(e.end == EpisodeEnd::Aborted);
            t.steps += e.steps;
            t.items_added += e.items_added;
        }
        out
    }

    pub fn items_added(&self) -> usize {
        self.episodes.iter().map(|e| e.items_added).sum()
    }
}

type Clock = Box<dyn Fn() -> DateTime<Utc> + Send + Sync>;

pub struct Explorer<'a> {
    pub config: &'a ExplorationConfig,
    pub agents: &'a Agents,
    pub gateway: &'a dyn ChatBackend,
    pub store: &'a KnowledgeStore,
    clock: Clock,
}

impl<'a> Explorer<'a> {
    pub fn new(
        config: &'a ExplorationConfig,
        agents: &'a Agents,
        gateway: &'a dyn ChatBackend,
        store: &'a KnowledgeStore,
    ) -> Self {
        Self { config, agents, gateway, store, clock: Box::new(Utc::now) }
    }

    /// Fixes the timestamp given to new items.
    pub fn with_clock(mut self, clock: impl Fn() -> DateTime<Utc> + Send + Sync + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn run(&self, device: &mut dyn Device) -> Result<ExplorationReport, ExplorationError> {
        self.config.validate()?;
        let mut report = ExplorationReport::default();
        for app in self.config.apps.iter().filter(|a| !a.trim().is_empty()) {
            for n in 1..=self.config.episodes_per_app {
                report.episodes.push(self.episode(device, app, n));
            }
        }
        Ok(report)
    }

    fn episode(&self, device: &mut dyn Device, app: &str, n: usize) -> EpisodeReport {
        let id = format!("explore-{}-{n}", app.to_lowercase().replace(char::is_whitespace, "_"));
        let mut rec = Recorder::new(&id);
        if let Some(dir) = &self.config.trace_dir {
            match TraceWriter::create(dir, &id) {
                Ok(w) => rec.add_sink(Box::new(w)),
                Err(e) => tracing::warn!("episode trace disabled: {e}"),
            }
        }
        rec.emit(RunEvent::RunStarted {
            instruction: format!("explore {app}"),
            app_hint: Some(app.to_string()),
            device: device.info().clone(),
            knowledge: Vec::new(),
            max_steps: self.config.max_steps_per_episode,
            reflectors: ReflectorToggles { action: false, trajectory: false, global: false },
        });
        let mut ep = Episode { id: id.clone(), app, steps: Vec::new(), seg_start: 0, items_added: 0 };
        let outcome = self.drive(device, &mut ep, &mut rec);
        let (end, error) = match outcome {
            Ok(end) => (end, None),
            Err(e) => {
                rec.emit(RunEvent::Warning { step: None, message: format!("episode aborted: {e}") });
                (EpisodeEnd::Aborted, Some(e))
            }
        };
        // No final summary for an aborted episode.
        if error.is_none() {
            if let Err(e) = self.summarize(&mut ep) {
                rec.emit(RunEvent::Warning { step: None, message: format!("final summary failed: {e}") });
            }
        }
        rec.emit(RunEvent::RunFinished {
            status: if error.is_some() { RunStatus::Failure } else { RunStatus::Success },
            answer: None,
            failure_label: None,
            steps: ep.steps.len(),
        });
        EpisodeReport { app: app.to_string(), episode: n, id, steps: ep.steps.len(), items_added: ep.items_added, end, error }
    }

    fn drive(&self, device: &mut dyn Device, ep: &mut Episode<'_>, rec: &mut Recorder) -> Result<EpisodeEnd, String> {
        let open = Action::Open { text: ep.app.to_string() };
        match device.execute(&open).map_err(|e| e.to_string())? {
            ExecReport::Rejected(r) => return Err(format!("cannot open {}: {r}", ep.app)),
            ExecReport::Applied | ExecReport::NoEffect => {}
        }
        let mut guidance = String::new();
        let mut idle = 0;
        for t in 0..self.config.max_steps_per_episode {
            let before = device.capture().map_err(|e| e.to_string())?;
            let shot = rec.shot(&before);
            rec.emit(RunEvent::StepStarted { step: t, screenshot: shot });
            let known = self.store.items_for_app(ep.app);
            let outcome = self
                .agents
                .run_explorer(
                    self.gateway,
                    &ExplorerInput { app: ep.app, guidance: &guidance, knowledge: &known, screenshot: &before, history: &ep.steps },
                )
                .map_err(|e| e.to_string())?;
            for w in outcome.warnings {
                rec.emit(RunEvent::Warning { step: Some(t), message: w });
            }
            let out = outcome.output;
            rec.emit(RunEvent::OperatorOutput {
                step: t,
                thought: out.thought.clone(),
                action: out.action.clone(),
                description: out.description.clone(),
                confidence: outcome.confidence.as_ref().map(|c| c.value()),
            });
            if out.action.is_terminate() {
                return Ok(EpisodeEnd::Terminated);
            }
            let report = device.execute(&out.action).map_err(|e| e.to_string())?;
            let after = device.capture().map_err(|e| e.to_string())?;
            let shot = rec.shot(&after);
            idle = if report == ExecReport::Applied { 0 } else { idle + 1 };
            rec.emit(RunEvent::ActionExecuted { step: t, report, screenshot: shot, changed_regions: Vec::new() });
            ep.steps.push(StepRecord::new(t, before, out, outcome.confidence, Some(after.clone())));

            if ep.steps.len() - ep.seg_start >= self.config.summary_stride {
                self.summarize(ep).map_err(|e| e.to_string())?;
            }
            if idle >= self.config.no_effect_limit {
                return Ok(EpisodeEnd::NoEffect);
            }
            if t + 1 < self.config.max_steps_per_episode {
                let known = self.store.items_for_app(ep.app);
                guidance = self
                    .agents
                    .run_critic_agent(self.gateway, ep.app, &after, &known, &ep.steps)
                    .map_err(|e| e.to_string())?;
            }
        }
        Ok(EpisodeEnd::StepCap)
    }

    /// Summarizes the steps since the last summary when there are at least two.
    fn summarize(&self, ep: &mut Episode<'_>) -> Result<(), AgentError> {
        let segment = &ep.steps[ep.seg_start..];
        if segment.len() < 2 {
            return Ok(());
        }
        let source = KnowledgeSource {
            episode: ep.id.clone(),
            steps: [segment[0].index, segment[segment.len() - 1].index],
        };
        let adv = self.agents.run_summary_agent(self.gateway, ep.app, segment, source, (self.clock)())?;
        if let Some(w) = adv.warning {
            tracing::warn!(episode = %ep.id, "{w}");
        }
        for item in adv.value {
            let before = self.store.len();
            match self.store.add(item) {
                Ok(_) => ep.items_added += self.store.len() - before,
                Err(e) => tracing::warn!(episode = %ep.id, "knowledge item dropped: {e}"),
            }
        }
        ep.seg_start = ep.steps.len();
        Ok(())
    }
}

struct Episode<'s> {
    id: String,
    app: &'s str,
    steps: Vec<StepRecord>,
    seg_start: usize,
    items_added: usize,
}

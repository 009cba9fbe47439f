//! The per-step loop: operator, execution, hierarchical reflection, progress.

mod abort;
mod events;
mod trace;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use abort::{AbortFlag, AbortRegistry, UnknownRun};
pub use events::{EventSink, MemorySink, Recorder, ReflectorToggles, RunEvent, TraceRecord, TRACE_VERSION};
pub use trace::{normalize_timestamps, read_trace, TraceError, TraceWriter, TRACE_FILE};

use crate::agents::{Agents, FeedbackBundle, GlobalInput, OperatorInput, TrajectoryInput};
use crate::device::{Device, DeviceError, ExecReport};
use crate::domain::{
    Action, FailureType, Instruction, Progress, ReflectionFeedback, RunResult, RunStatus,
    Screenshot, StepRecord, TerminateStatus, Verdict,
};
use crate::gate::{
    global_window_start, should_reflect_action, should_reflect_trajectory, GateConfig, GateError,
    Trigger,
};
use crate::gateway::ChatBackend;
use crate::knowledge::{KnowledgeItem, KnowledgeStore};
use crate::perception::{annotate, diff_regions, DiffParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub max_steps: usize,
    pub gate: GateConfig,
    pub enable_action_reflector: bool,
    pub enable_trajectory_reflector: bool,
    pub enable_global_reflector: bool,
    pub knowledge_limit: usize,
    /// Incomplete verdicts honoured per run before a terminate is forced through.
    pub global_max_rejections: usize,
    pub diff: DiffParams,
    pub template_dir: Option<PathBuf>,
    pub trace_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_steps: 30,
            gate: GateConfig::default(),
            enable_action_reflector: true,
            enable_trajectory_reflector: true,
            enable_global_reflector: true,
            knowledge_limit: 5,
            global_max_rejections: 3,
            diff: DiffParams::default(),
            template_dir: None,
            trace_dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("max_steps must be at least 1")]
    MaxSteps,
    #[error(transparent)]
    Gate(#[from] GateError),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_steps == 0 {
            return Err(ConfigError::MaxSteps);
        }
        self.gate.validate()?;
        Ok(())
    }

    /// Operator and Progressor only.
    pub fn base(mut self) -> Self {
        self.enable_action_reflector = false;
        self.enable_trajectory_reflector = false;
        self.enable_global_reflector = false;
        self
    }

    pub fn toggles(&self) -> ReflectorToggles {
        ReflectorToggles {
            action: self.enable_action_reflector,
            trajectory: self.enable_trajectory_reflector,
            global: self.enable_global_reflector,
        }
    }
}

/// Everything a run borrows.
#[derive(Clone, Copy)]
pub struct Orchestrator<'a> {
    pub config: &'a RunConfig,
    pub agents: &'a Agents,
    pub gateway: &'a dyn ChatBackend,
    pub store: Option<&'a KnowledgeStore>,
}

/// Why a run stopped before finishing normally.
enum Stop {
    Aborted,
    Fatal(String),
}

struct Run<'r, 'a> {
    o: Orchestrator<'a>,
    instruction: &'r Instruction,
    device: &'r mut dyn Device,
    rec: &'r mut Recorder,
    abort: &'r AbortFlag,
    knowledge: Vec<KnowledgeItem>,
    steps: Vec<StepRecord>,
    progress: Progress,
    feedback: FeedbackBundle,
    rejections: usize,
}

impl<'a> Orchestrator<'a> {
    pub fn new(config: &'a RunConfig, agents: &'a Agents, gateway: &'a dyn ChatBackend) -> Self {
        Self { config, agents, gateway, store: None }
    }

    pub fn with_store(mut self, store: &'a KnowledgeStore) -> Self {
        self.store = Some(store);
        self
    }

    /// Runs one task to completion. Never fails: errors end the run with a
    /// `failure` status and a warning event.
    pub fn run(
        &self,
        instruction: &Instruction,
        device: &mut dyn Device,
        recorder: &mut Recorder,
        abort: &AbortFlag,
    ) -> RunResult {
        let knowledge = self
            .store
            .map(|s| s.retrieve(instruction, self.config.knowledge_limit))
            .unwrap_or_default();
        let mut run = Run {
            o: *self,
            instruction,
            device,
            rec: recorder,
            abort,
            knowledge,
            steps: Vec::new(),
            progress: Progress::default(),
            feedback: FeedbackBundle::default(),
            rejections: 0,
        };
        run.execute()
    }
}

impl Run<'_, '_> {
    fn execute(&mut self) -> RunResult {
        self.rec.emit(RunEvent::RunStarted {
            instruction: self.instruction.text().to_string(),
            app_hint: self.instruction.app_hint().map(str::to_string),
            device: self.device.info().clone(),
            knowledge: self.knowledge.iter().map(|k| k.id.clone()).collect(),
            max_steps: self.o.config.max_steps,
            reflectors: self.o.config.toggles(),
        });
        for t in 0..self.o.config.max_steps {
            match self.step(t) {
                Ok(None) => {}
                Ok(Some(status)) => return self.finish(status, None),
                Err(Stop::Aborted) => return self.finish(RunStatus::Aborted, None),
                Err(Stop::Fatal(message)) => {
                    self.warn(Some(t), message);
                    return self.finish(RunStatus::Failure, Some(FailureType::Other));
                }
            }
        }
        self.finish(RunStatus::MaxStepsExceeded, None)
    }

    fn finish(&mut self, status: RunStatus, failure_label: Option<FailureType>) -> RunResult {
        let answer = self.progress.answer.clone();
        self.rec.emit(RunEvent::RunFinished {
            status,
            answer: answer.clone(),
            failure_label,
            steps: self.steps.len(),
        });
        RunResult { status, steps: std::mem::take(&mut self.steps), answer, failure_label }
    }

    fn warn(&mut self, step: Option<usize>, message: impl Into<String>) {
        let message = message.into();
        tracing::warn!(step, "{message}");
        self.rec.emit(RunEvent::Warning { step, message });
    }

    fn checkpoint(&self) -> Result<(), Stop> {
        if self.abort.is_set() {
            Err(Stop::Aborted)
        } else {
            Ok(())
        }
    }

    fn capture(&mut self) -> Result<Screenshot, Stop> {
        self.device.capture().map_err(|e| Stop::Fatal(format!("screen capture failed: {e}")))
    }

    /// One step; `Some(status)` when an accepted terminate ends the run.
    fn step(&mut self, t: usize) -> Result<Option<RunStatus>, Stop> {
        let cfg = self.o.config;
        self.checkpoint()?;
        let before = self.capture()?;
        let screenshot = self.rec.shot(&before);
        self.rec.emit(RunEvent::StepStarted { step: t, screenshot });

        self.checkpoint()?;
        let outcome = self
            .o
            .agents
            .run_operator(
                self.o.gateway,
                &OperatorInput {
                    instruction: self.instruction,
                    knowledge: &self.knowledge,
                    screenshot: &before,
                    history: &self.steps,
                    feedback: &self.feedback,
                    progress: &self.progress,
                },
            )
            .map_err(|e| Stop::Fatal(format!("operator failed: {e}")))?;
        for w in outcome.warnings {
            self.warn(Some(t), w);
        }
        let output = outcome.output;
        let confidence = outcome.confidence;
        self.rec.emit(RunEvent::OperatorOutput {
            step: t,
            thought: output.thought.clone(),
            action: output.action.clone(),
            description: output.description.clone(),
            confidence: confidence.as_ref().map(|c| c.value()),
        });
        let terminate = match output.action {
            Action::Terminate { status } => Some(status),
            _ => None,
        };
        let reflect = terminate.is_none()
            && cfg.enable_action_reflector
            && should_reflect_action(confidence.as_ref(), &cfg.gate);
        self.rec.emit(RunEvent::ConfidenceGated {
            step: t,
            reflect,
            confidence: confidence.as_ref().map(|c| c.value()),
        });

        let mut step = StepRecord::new(t, before.clone(), output, confidence, None);
        if let Some(status) = terminate {
            self.checkpoint()?;
            let (accepted, feedback) = self.handle_terminate(&step, status);
            if let Some(fb) = feedback {
                step.add_reflection(fb).expect("one global reflection per step");
            }
            if accepted {
                step.progress_after = self.progress.clone();
                self.steps.push(step);
                return Ok(Some(match status {
                    TerminateStatus::Success => RunStatus::Success,
                    TerminateStatus::Failure => RunStatus::Failure,
                }));
            }
        } else {
            self.checkpoint()?;
            let report = match self.device.execute(&step.action_output.action) {
                Ok(r) => r,
                Err(e @ (DeviceError::UnknownApp(_) | DeviceError::Command(_))) => {
                    self.warn(Some(t), format!("action rejected by device: {e}"));
                    ExecReport::Rejected(e.to_string())
                }
                Err(e) => return Err(Stop::Fatal(format!("action execution failed: {e}"))),
            };
            let after = self.capture()?;
            let regions = diff_regions(&before, &after, &cfg.diff).unwrap_or_else(|e| {
                tracing::warn!("screen diff skipped: {e}");
                Vec::new()
            });
            let screenshot = self.rec.shot(&after);
            self.rec.emit(RunEvent::ActionExecuted {
                step: t,
                report,
                screenshot,
                changed_regions: regions.clone(),
            });
            step.screenshot_after = Some(after.clone());

            if reflect {
                self.checkpoint()?;
                let annotated = annotate(&after, &regions).unwrap_or_else(|_| after.clone());
                let res = self.o.agents.run_action_reflector(
                    self.o.gateway,
                    self.instruction,
                    &before,
                    &annotated,
                    &regions,
                    &step.action_output,
                    t,
                );
                if let Some(fb) = self.advisory(t, "action reflector", res, Vec::new()) {
                    step.add_reflection(fb).expect("one action reflection per step");
                }
            }

            if cfg.enable_trajectory_reflector {
                self.steps.push(step);
                let (fire, triggers) = should_reflect_trajectory(&self.steps, &cfg.gate);
                let fb = if fire {
                    if self.abort.is_set() {
                        self.steps.pop();
                        return Err(Stop::Aborted);
                    }
                    let from = self.steps.len().saturating_sub(cfg.gate.trajectory_window);
                    let res = self.o.agents.run_trajectory_reflector(
                        self.o.gateway,
                        &TrajectoryInput {
                            instruction: self.instruction,
                            progress: &self.progress,
                            window: &self.steps[from..],
                            triggers: &triggers,
                            step_index: t,
                        },
                    );
                    self.advisory(t, "trajectory reflector", res, triggers)
                } else {
                    None
                };
                step = self.steps.pop().expect("pushed above");
                if let Some(fb) = fb {
                    step.add_reflection(fb).expect("one trajectory reflection per step");
                }
            }
        }

        self.checkpoint()?;
        let feedback = FeedbackBundle::from_step(&step);
        self.progress = self
            .o
            .agents
            .run_progressor(self.o.gateway, self.instruction, &self.steps, &self.progress, &step.action_output, &feedback)
            .map_err(|e| Stop::Fatal(format!("progressor failed: {e}")))?;
        self.rec.emit(RunEvent::ProgressUpdated { step: t, progress: self.progress.clone() });
        step.progress_after = self.progress.clone();
        self.feedback = feedback;
        self.steps.push(step);
        Ok(None)
    }

    /// Emits a reflection event for a reflector result; gateway failures
    /// become warnings and the reflection is skipped.
    fn advisory(
        &mut self,
        t: usize,
        who: &str,
        res: Result<crate::agents::Advisory<ReflectionFeedback>, crate::agents::AgentError>,
        triggers: Vec<Trigger>,
    ) -> Option<ReflectionFeedback> {
        match res {
            Ok(adv) => {
                if let Some(w) = adv.warning {
                    self.warn(Some(t), w);
                }
                self.rec.emit(RunEvent::Reflection { step: t, feedback: adv.value.clone(), triggers });
                Some(adv.value)
            }
            Err(e) => {
                self.warn(Some(t), format!("{who} failed, skipped: {e}"));
                None
            }
        }
    }

    /// Global check of a proposed terminate. Returns whether it is accepted
    /// and the feedback to record.
    fn handle_terminate(&mut self, step: &StepRecord, status: TerminateStatus) -> (bool, Option<ReflectionFeedback>) {
        let t = step.index;
        let cfg = self.o.config;
        if !cfg.enable_global_reflector {
            self.intercepted(t, status, Verdict::Ok, true);
            return (true, None);
        }
        let j = global_window_start(t);
        let screenshots: Vec<(usize, Screenshot)> = self.steps[j..]
            .iter()
            .map(|s| (s.index, s.screenshot_before.clone()))
            .chain(std::iter::once((t, step.screenshot_before.clone())))
            .collect();
        let mut history = self.steps.clone();
        history.push(step.clone());
        let res = self.o.agents.run_global_reflector(
            self.o.gateway,
            &GlobalInput {
                instruction: self.instruction,
                progress: &self.progress,
                history: &history,
                screenshots: &screenshots,
                step_index: t,
            },
        );
        let Some(fb) = self.advisory(t, "global reflector", res, Vec::new()) else {
            self.warn(Some(t), "terminate accepted without a global check");
            self.intercepted(t, status, Verdict::Ok, true);
            return (true, None);
        };
        let accepted = if fb.verdict == Verdict::Ok {
            true
        } else {
            self.rejections += 1;
            if self.rejections > cfg.global_max_rejections {
                self.warn(
                    Some(t),
                    format!("terminate accepted after {} incomplete verdicts", self.rejections),
                );
                true
            } else {
                false
            }
        };
        self.intercepted(t, status, fb.verdict, accepted);
        (accepted, Some(fb))
    }

    fn intercepted(&mut self, step: usize, status: TerminateStatus, verdict: Verdict, accepted: bool) {
        self.rec.emit(RunEvent::TerminateIntercepted { step, status, verdict, accepted });
    }
}

/// Runs a task with a fresh recorder writing to `config.trace_dir` when set.
pub fn run_task(
    orchestrator: &Orchestrator<'_>,
    instruction: &Instruction,
    device: &mut dyn Device,
    run_id: &str,
    sinks: Vec<Box<dyn EventSink>>,
    abort: &AbortFlag,
) -> Result<RunResult, TraceError> {
    let mut rec = Recorder::new(run_id);
    if let Some(dir) = &orchestrator.config.trace_dir {
        rec.add_sink(Box::new(TraceWriter::create(dir, run_id)?));
    }
    for s in sinks {
        rec.add_sink(s);
    }
    Ok(orchestrator.run(instruction, device, &mut rec, abort))
}

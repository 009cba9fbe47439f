//! The scripted benchmark: a suite of sim tasks, each driven by a
//! deterministic policy with one planted mistake, run under several reflector
//! configurations.

mod policy;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::Agents;
use crate::device::sim::{check_success, Difficulty};
use crate::device::{SimDevice, SimTask, World};
use crate::domain::{Action, FailureType, Instruction, ReflectionLevel, RunStatus};
use crate::orchestrator::{AbortFlag, Orchestrator, Recorder, RunConfig};

pub use policy::{PolicyBackend, CONFIDENT, STUCK_CONFIDENCE};

/// Confidence given to a slip when the suite does not set one.
pub const DEFAULT_SLIP_CONFIDENCE: f64 = -0.05;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {message}")]
    Load { path: String, message: String },
    #[error("task {task}: {message}")]
    Task { task: String, message: String },
    #[error("invalid run config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    ActionSlip,
    Stuck,
    PrematureTerminate,
    WrongAnswer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaultSpec {
    pub kind: FaultKind,
    /// Plan index at which the fault replaces the planned action.
    pub at: usize,
    pub action: Option<Action>,
    pub confidence: Option<f64>,
    /// Plan index the policy continues from when a slip goes unnoticed.
    pub believed: usize,
    pub recovery: Vec<Action>,
    pub resume: usize,
    pub label: FailureType,
    pub explanation: String,
    pub suggestion: Option<String>,
}

impl FaultSpec {
    pub fn confidence(&self) -> f64 {
        self.confidence.unwrap_or(match self.kind {
            FaultKind::ActionSlip => DEFAULT_SLIP_CONFIDENCE,
            _ => CONFIDENT,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchTask {
    pub task: String,
    pub plan: Vec<Action>,
    pub fault: Option<FaultSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteFile {
    world: String,
    #[serde(default = "default_max_steps")]
    max_steps: usize,
    tasks: Vec<RawTask>,
}

fn default_max_steps() -> usize {
    12
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTask {
    task: String,
    plan: Vec<String>,
    fault: Option<RawFault>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFault {
    kind: FaultKind,
    at: usize,
    action: Option<String>,
    confidence: Option<f64>,
    believed: Option<usize>,
    #[serde(default)]
    recovery: Vec<String>,
    resume: Option<usize>,
    label: FailureType,
    explanation: String,
    suggestion: Option<String>,
}

#[derive(Debug, Clone)]
pub struct BenchSuite {
    pub world: Arc<World>,
    pub tasks: Vec<BenchTask>,
    pub max_steps: usize,
}

impl BenchSuite {
    /// Loads a suite file; its `world` path is relative to the suite file.
    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let load_err = |message: String| BenchError::Load { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let file: SuiteFile = toml::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        let world_path = path.parent().unwrap_or(Path::new(".")).join(&file.world);
        let world = World::load(&world_path).map_err(|e| load_err(e.to_string()))?;
        Self::from_parts(Arc::new(world), file)
    }

    pub fn from_toml(text: &str, world: Arc<World>) -> Result<Self, BenchError> {
        let file: SuiteFile =
            toml::from_str(text).map_err(|e| BenchError::Load { path: "<suite>".into(), message: e.to_string() })?;
        Self::from_parts(world, file)
    }

    fn from_parts(world: Arc<World>, file: SuiteFile) -> Result<Self, BenchError> {
        if file.tasks.is_empty() {
            return Err(BenchError::Load { path: file.world, message: "suite has no tasks".into() });
        }
        if file.max_steps == 0 {
            return Err(BenchError::Config("max_steps must be at least 1".into()));
        }
        let tasks = file.tasks.into_iter().map(|raw| convert(raw, &world)).collect::<Result<_, _>>()?;
        Ok(Self { world, tasks, max_steps: file.max_steps })
    }

    pub fn sim_task(&self, task: &BenchTask) -> &SimTask {
        self.world.task(&task.task).expect("validated on load")
    }
}

fn convert(raw: RawTask, world: &World) -> Result<BenchTask, BenchError> {
    let err = |message: String| BenchError::Task { task: raw.task.clone(), message };
    if world.task(&raw.task).is_none() {
        return Err(err("not defined in the world".into()));
    }
    let parse = |s: &String| Action::parse(s).map_err(|e| err(format!("bad action {s}: {e}")));
    let plan: Vec<Action> = raw.plan.iter().map(parse).collect::<Result<_, _>>()?;
    if !plan.last().is_some_and(Action::is_terminate) {
        return Err(err("plan must end with terminate".into()));
    }
    let fault = match &raw.fault {
        None => None,
        Some(f) => {
            if f.at >= plan.len() {
                return Err(err(format!("fault index {} is past the plan", f.at)));
            }
            let action = f.action.as_ref().map(parse).transpose()?;
            if action.is_none() && f.kind != FaultKind::PrematureTerminate {
                return Err(err("this fault kind needs an action".into()));
            }
            let resume = f.resume.unwrap_or(f.at);
            let believed = f.believed.unwrap_or(f.at + 1);
            if resume >= plan.len() || believed >= plan.len() {
                return Err(err("resume and believed must index the plan".into()));
            }
            Some(FaultSpec {
                kind: f.kind,
                at: f.at,
                action,
                confidence: f.confidence,
                believed,
                recovery: f.recovery.iter().map(parse).collect::<Result<_, _>>()?,
                resume,
                label: f.label,
                explanation: f.explanation.clone(),
                suggestion: f.suggestion.clone(),
            })
        }
    };
    Ok(BenchTask { task: raw.task, plan, fault })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    pub task: String,
    pub difficulty: Difficulty,
    pub status: RunStatus,
    pub success: bool,
    pub steps: usize,
    pub action_reflections: usize,
    pub trajectory_reflections: usize,
    pub global_reflections: usize,
    pub failure_label: Option<FailureType>,
}

/// Runs one task on a fresh sim device; success is judged by the world's
/// predicate, not by the run status.
pub fn run_bench_task(suite: &BenchSuite, task: &BenchTask, config: &RunConfig) -> TaskOutcome {
    let sim_task = suite.sim_task(task);
    let mut config = config.clone();
    config.max_steps = suite.max_steps;
    config.trace_dir = None;
    let agents = Agents::default();
    let backend = PolicyBackend::new(task.clone());
    let orch = Orchestrator::new(&config, &agents, &backend);
    let mut device = SimDevice::for_task(suite.world.clone(), sim_task);
    let mut recorder = Recorder::new(format!("bench-{}", task.task));
    let mut instruction = Instruction::new(&sim_task.instruction).expect("world tasks have instructions");
    if let Some(app) = &sim_task.app {
        instruction = instruction.with_app_hint(app);
    }
    let result = orch.run(&instruction, &mut device, &mut recorder, &AbortFlag::new());
    let success = check_success(sim_task, device.state(), &result);
    let failure_label = if success {
        None
    } else {
        Some(task.fault.as_ref().map_or(FailureType::Other, |f| f.label))
    };
    TaskOutcome {
        task: task.task.clone(),
        difficulty: sim_task.difficulty,
        status: result.status,
        success,
        steps: result.steps.len(),
        action_reflections: result.reflection_count(ReflectionLevel::Action),
        trajectory_reflections: result.reflection_count(ReflectionLevel::Trajectory),
        global_reflections: result.reflection_count(ReflectionLevel::Global),
        failure_label,
    }
}

/// The five ablation rows. The first four reflect on every step; the last
/// gates action reflection on confidence with `base`'s threshold.
pub fn ablation_configs(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let always = |action, trajectory, global| {
        let mut c = base.clone();
        c.gate.theta = 0.0;
        c.enable_action_reflector = action;
        c.enable_trajectory_reflector = trajectory;
        c.enable_global_reflector = global;
        c
    };
    let mut on_demand = base.clone();
    on_demand.enable_action_reflector = true;
    on_demand.enable_trajectory_reflector = true;
    on_demand.enable_global_reflector = true;
    vec![
        ("Base".into(), always(false, false, false)),
        ("+Action".into(), always(true, false, false)),
        ("+Trajectory".into(), always(true, true, false)),
        ("+Global".into(), always(true, true, true)),
        ("+Reflection-on-Demand".into(), on_demand),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRow {
    pub name: String,
    pub theta: f64,
    pub outcomes: Vec<TaskOutcome>,
}

impl ConfigRow {
    pub fn successes(&self) -> usize {
        self.outcomes.iter().filter(|o| o.success).count()
    }

    pub fn successes_at(&self, d: Difficulty) -> (usize, usize) {
        let of: Vec<_> = self.outcomes.iter().filter(|o| o.difficulty == d).collect();
        (of.iter().filter(|o| o.success).count(), of.len())
    }

    pub fn steps(&self) -> usize {
        self.outcomes.iter().map(|o| o.steps).sum()
    }

    /// Fraction of executed steps that went through the action reflector.
    pub fn action_reflection_rate(&self) -> f64 {
        let steps = self.steps();
        if steps == 0 {
            return 0.0;
        }
        self.outcomes.iter().map(|o| o.action_reflections).sum::<usize>() as f64 / steps as f64
    }

    pub fn failures(&self, label: FailureType) -> usize {
        self.outcomes.iter().filter(|o| o.failure_label == Some(label)).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<ConfigRow>,
    pub elapsed: Duration,
}

pub fn run_configs(suite: &BenchSuite, configs: &[(String, RunConfig)]) -> Result<BenchReport, BenchError> {
    let start = Instant::now();
    let mut rows = Vec::with_capacity(configs.len());
    for (name, cfg) in configs {
        cfg.validate().map_err(|e| BenchError::Config(e.to_string()))?;
        let outcomes = suite.tasks.iter().map(|t| run_bench_task(suite, t, cfg)).collect();
        rows.push(ConfigRow { name: name.clone(), theta: cfg.gate.theta, outcomes });
    }
    Ok(BenchReport { rows, elapsed: start.elapsed() })
}

/// All five ablation rows.
pub fn run_suite(suite: &BenchSuite, base: &RunConfig) -> Result<BenchReport, BenchError> {
    run_configs(suite, &ablation_configs(base))
}

pub const SWEEP_THETAS: [f64; 4] = [0.0, -0.001, -0.01, f64::NEG_INFINITY];

/// The full configuration at each threshold.
pub fn theta_sweep(suite: &BenchSuite, base: &RunConfig, thetas: &[f64]) -> Result<BenchReport, BenchError> {
    let configs: Vec<(String, RunConfig)> = thetas
        .iter()
        .map(|&theta| {
            let mut c = base.clone();
            c.enable_action_reflector = true;
            c.enable_trajectory_reflector = true;
            c.enable_global_reflector = true;
            c.gate.theta = theta;
            (format!("theta={theta}"), c)
        })
        .collect();
    run_configs(suite, &configs)
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&ConfigRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<24} {:>7} {:>7} {:>7} {:>7} {:>9}",
            "config", "easy", "medium", "hard", "total", "reflect%"
        );
        for row in &self.rows {
            let cell = |d| {
                let (s, n) = row.successes_at(d);
                format!("{s}/{n}")
            };
            let _ = writeln!(
                out,
                "{:<24} {:>7} {:>7} {:>7} {:>7} {:>8.1}%",
                row.name,
                cell(Difficulty::Easy),
                cell(Difficulty::Medium),
                cell(Difficulty::Hard),
                format!("{}/{}", row.successes(), row.outcomes.len()),
                row.action_reflection_rate() * 100.0
            );
        }
        out
    }

    /// Failure counts per label for each row, omitting empty labels.
    pub fn render_failures(&self) -> String {
        const LABELS: [FailureType; 6] = [
            FailureType::Planning,
            FailureType::Navigation,
            FailureType::Interaction,
            FailureType::Perception,
            FailureType::Grounding,
            FailureType::Other,
        ];
        let mut out = String::new();
        for row in &self.rows {
            let parts: Vec<String> = LABELS
                .iter()
                .filter(|l| row.failures(**l) > 0)
                .map(|l| format!("{}={}", label_name(*l), row.failures(*l)))
                .collect();
            let _ = writeln!(out, "{:<24} {}", row.name, if parts.is_empty() { "-".into() } else { parts.join(" ") });
        }
        out
    }
}

fn label_name(l: FailureType) -> String {
    serde_json::to_value(l).ok().and_then(|v| v.as_str().map(str::to_owned)).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    const WORLD: &str = r#"
[[apps]]
name = "Files"
home = "files"

[[screens]]
id = "files"
app = "Files"
title = "Files"

[[tasks]]
id = "t"
instruction = "do it"
difficulty = "easy"
success = {}
"#;

    fn world() -> Arc<World> {
        Arc::new(World::from_toml(WORLD).unwrap())
    }

    #[test]
    fn suite_validation() {
        let ok = "world = \"w\"\n[[tasks]]\ntask = \"t\"\nplan = ['{\"action_type\": \"terminate\", \"status\": \"success\"}']\n";
        assert_eq!(BenchSuite::from_toml(ok, world()).unwrap().tasks.len(), 1);
        let no_term = "world = \"w\"\n[[tasks]]\ntask = \"t\"\nplan = ['{\"action_type\": \"wait\"}']\n";
        assert!(BenchSuite::from_toml(no_term, world()).is_err());
        let unknown = ok.replace("task = \"t\"", "task = \"nope\"");
        assert!(BenchSuite::from_toml(&unknown, world()).is_err());
        assert!(BenchSuite::from_toml("world = \"w\"\ntasks = []\n", world()).is_err());
        let bad_at = format!("{ok}[tasks.fault]\nkind = \"premature_terminate\"\nat = 4\nlabel = \"planning\"\nexplanation = \"x\"\n");
        assert!(BenchSuite::from_toml(&bad_at, world()).is_err());
        let no_action = format!("{ok}[tasks.fault]\nkind = \"stuck\"\nat = 0\nlabel = \"navigation\"\nexplanation = \"x\"\n");
        assert!(BenchSuite::from_toml(&no_action, world()).is_err());
    }

    #[test]
    fn ablation_rows_differ_only_in_toggles_and_theta() {
        let rows = ablation_configs(&RunConfig::default());
        let names: Vec<&str> = rows.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["Base", "+Action", "+Trajectory", "+Global", "+Reflection-on-Demand"]);
        assert_eq!(rows[0].1.toggles(), RunConfig::default().base().toggles());
        assert!(rows[..4].iter().all(|(_, c)| c.gate.theta == 0.0));
        assert_eq!(rows[4].1.gate.theta, -0.001);
    }
}

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use deckhand_core::exploration::ExplorationConfig;
use deckhand_core::orchestrator::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "deckhand", version, about = "Run, explore, benchmark and replay GUI agent tasks")]
pub struct Cli {
    /// Settings file (TOML); environment variables override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// `sim` or `adb:<serial>`.
    #[arg(long, global = true, value_name = "DEVICE", default_value = "sim")]
    pub device: String,
    /// App world for the sim device.
    #[arg(long, global = true, value_name = "FILE")]
    pub world: Option<PathBuf>,
    /// Write `<dir>/<run_id>/trace.jsonl` and screenshots.
    #[arg(long, global = true, value_name = "DIR")]
    pub trace_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Execute one task and print its events.
    Run(RunArgs),
    /// Explore apps without instructions and store what is learned.
    Explore(ExploreArgs),
    /// Run a scripted suite under every reflector configuration.
    Bench(BenchArgs),
    /// Print a recorded trace step by step.
    Replay(ReplayArgs),
    /// Start the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// What to do; defaults to the instruction of `--task`.
    pub instruction: Option<String>,
    /// Sim task id; its initial state is applied and its goal is checked.
    #[arg(long, value_name = "ID")]
    pub task: Option<String>,
    /// App the instruction is about.
    #[arg(long, value_name = "NAME")]
    pub app: Option<String>,
    /// Replay canned model replies from a JSON file instead of calling a model.
    #[arg(long, value_name = "FILE")]
    pub script: Option<PathBuf>,
    /// Knowledge store (JSON lines) to retrieve from.
    #[arg(long, value_name = "FILE")]
    pub knowledge: Option<PathBuf>,
    #[arg(long, value_name = "ID")]
    pub run_id: Option<String>,
    /// Print raw trace records instead of text.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub flags: RunFlags,
}

/// Overrides for [`RunConfig`] and its gate.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    #[arg(long, value_name = "N")]
    pub max_steps: Option<usize>,
    /// Reflect on an action when its confidence is at or below this; `-inf` never.
    #[arg(long, value_name = "LOGPROB", allow_hyphen_values = true)]
    pub theta: Option<f64>,
    #[arg(long, value_name = "N")]
    pub trajectory_window: Option<usize>,
    #[arg(long, value_name = "N")]
    pub repeat_action_count: Option<usize>,
    #[arg(long, value_name = "N")]
    pub repeat_screen_count: Option<usize>,
    #[arg(long, value_name = "FRACTION")]
    pub screen_same_threshold: Option<f64>,
    #[arg(long, value_name = "N")]
    pub accumulated_error_count: Option<usize>,
    #[arg(long, value_name = "N")]
    pub knowledge_limit: Option<usize>,
    #[arg(long, value_name = "N")]
    pub global_max_rejections: Option<usize>,
    /// Side of the square blocks compared when diffing screenshots.
    #[arg(long, value_name = "PX")]
    pub diff_block_size: Option<u32>,
    /// Mean channel difference above which a block counts as changed.
    #[arg(long, value_name = "LEVEL")]
    pub diff_threshold: Option<f64>,
    #[arg(long)]
    pub no_action_reflector: bool,
    #[arg(long)]
    pub no_trajectory_reflector: bool,
    #[arg(long)]
    pub no_global_reflector: bool,
    /// Directory of `<role>.txt` prompt templates overriding the built-ins.
    #[arg(long, value_name = "DIR")]
    pub template_dir: Option<PathBuf>,
}

impl RunFlags {
    pub fn apply(&self, c: &mut RunConfig) {
        macro_rules! set {
            ($($flag:ident => $slot:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $slot = v; })*
            };
        }
        set! {
            max_steps => c.max_steps,
            theta => c.gate.theta,
            trajectory_window => c.gate.trajectory_window,
            repeat_action_count => c.gate.repeat_action_count,
            repeat_screen_count => c.gate.repeat_screen_count,
            screen_same_threshold => c.gate.screen_same_threshold,
            accumulated_error_count => c.gate.accumulated_error_count,
            knowledge_limit => c.knowledge_limit,
            global_max_rejections => c.global_max_rejections,
            diff_block_size => c.diff.block_size,
            diff_threshold => c.diff.per_block_threshold,
        }
        if self.template_dir.is_some() {
            c.template_dir = self.template_dir.clone();
        }
        c.enable_action_reflector &= !self.no_action_reflector;
        c.enable_trajectory_reflector &= !self.no_trajectory_reflector;
        c.enable_global_reflector &= !self.no_global_reflector;
    }
}

#[derive(Debug, Args)]
pub struct ExploreArgs {
    /// Apps to explore, comma separated.
    #[arg(long, value_name = "APPS", value_delimiter = ',')]
    pub apps: Vec<String>,
    #[arg(long, value_name = "N")]
    pub episodes: Option<usize>,
    #[arg(long, value_name = "N")]
    pub max_steps: Option<usize>,
    /// Executed steps between summaries.
    #[arg(long, value_name = "N")]
    pub summary_stride: Option<usize>,
    /// Consecutive no-effect actions that end an episode.
    #[arg(long, value_name = "N")]
    pub no_effect_limit: Option<usize>,
    /// Knowledge store to add items to.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub script: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub template_dir: Option<PathBuf>,
}

impl ExploreArgs {
    pub fn apply(&self, c: &mut ExplorationConfig) {
        if !self.apps.is_empty() {
            c.apps = self.apps.iter().map(|a| a.trim().to_string()).filter(|a| !a.is_empty()).collect();
        }
        if let Some(v) = self.episodes {
            c.episodes_per_app = v;
        }
        if let Some(v) = self.max_steps {
            c.max_steps_per_episode = v;
        }
        if let Some(v) = self.summary_stride {
            c.summary_stride = v;
        }
        if let Some(v) = self.no_effect_limit {
            c.no_effect_limit = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Suite file; its `world` path is relative to it.
    #[arg(long, value_name = "FILE")]
    pub suite: PathBuf,
    /// Thresholds for the sweep, comma separated.
    #[arg(long, value_name = "LIST", value_delimiter = ',', allow_hyphen_values = true)]
    pub thetas: Vec<f64>,
    /// Print the reports as JSON.
    #[arg(long)]
    pub json: bool,
    #[command(flatten)]
    pub flags: RunFlags,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// A `trace.jsonl` file or the run directory holding one.
    pub trace: PathBuf,
    /// Print only this step.
    #[arg(long, value_name = "N")]
    pub step: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Address to listen on; defaults to the configured `service_bind`.
    #[arg(long, value_name = "HOST:PORT")]
    pub bind: Option<String>,
    /// Static console files to serve at `/`.
    #[arg(long, value_name = "DIR")]
    pub console_dir: Option<PathBuf>,
    /// Knowledge store (JSON lines).
    #[arg(long, value_name = "FILE")]
    pub knowledge: Option<PathBuf>,
    /// Answer every run from this script instead of a model.
    #[arg(long, value_name = "FILE")]
    pub script: Option<PathBuf>,
    #[command(flatten)]
    pub flags: RunFlags,
}

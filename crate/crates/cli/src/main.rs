mod args;
mod render;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::Parser;
use deckhand_core::agents::Agents;
use deckhand_core::bench::{run_suite, theta_sweep, BenchReport, BenchSuite, SWEEP_THETAS};
use deckhand_core::config::Settings;
use deckhand_core::device::{AdbDevice, Device, SimDevice, SystemRunner, World};
use deckhand_core::domain::{Instruction, RunStatus};
use deckhand_core::exploration::{EpisodeEnd, Explorer};
use deckhand_core::gateway::{ChatBackend, ScriptedBackend};
use deckhand_core::knowledge::KnowledgeStore;
use deckhand_core::orchestrator::{read_trace, run_task, AbortFlag, Orchestrator, RunConfig, RunEvent, TraceRecord, TRACE_FILE};
use deckhand_core::device::sim::check_success;
use deckhand_service::{DeviceFactory, GatewayFactory, Service, ServiceConfig};

use args::{BenchArgs, Cli, Command, ExploreArgs, ReplayArgs, RunArgs, ServeArgs};

/// Exit codes: 0 success, 1 task failure, 2 usage or configuration, 3 environment.
struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl std::fmt::Display) -> Failure {
    Failure { code: 2, message: message.to_string() }
}

fn environment(message: impl std::fmt::Display) -> Failure {
    Failure { code: 3, message: message.to_string() }
}

type Outcome = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    // DECKHAND_LOG=debug and friends; warnings only by default.
    let level = std::env::var("DECKHAND_LOG").ok().and_then(|v| v.parse().ok()).unwrap_or(tracing::Level::WARN);
    tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .with_ansi(std::io::IsTerminal::is_terminal(&std::io::stderr()))
        .init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: &Cli) -> Outcome {
    let settings = Settings::load_from_process(cli.config.as_deref()).map_err(usage)?;
    match &cli.command {
        Command::Run(a) => run(cli, settings, a),
        Command::Explore(a) => explore(cli, settings, a),
        Command::Bench(a) => bench(settings, a),
        Command::Replay(a) => replay(a),
        Command::Serve(a) => serve(cli, settings, a),
    }
}

enum DeviceSpec {
    Sim,
    Adb(String),
}

fn device_spec(text: &str) -> Result<DeviceSpec, Failure> {
    match text.split_once(':') {
        None if text == "sim" => Ok(DeviceSpec::Sim),
        Some(("adb", serial)) if !serial.trim().is_empty() => Ok(DeviceSpec::Adb(serial.trim().to_string())),
        _ => Err(usage(format!("--device must be `sim` or `adb:<serial>`, got {text:?}"))),
    }
}

fn load_world(cli: &Cli) -> Result<Arc<World>, Failure> {
    let path = cli.world.as_ref().ok_or_else(|| usage("the sim device needs --world <file>"))?;
    World::load(path).map(Arc::new).map_err(usage)
}

/// Builds devices for the selected backend; sim devices start from `initial`.
fn device_factory(cli: &Cli, settings: &Settings, task: Option<&str>) -> Result<DeviceFactory, Failure> {
    match device_spec(&cli.device)? {
        DeviceSpec::Sim => {
            let world = load_world(cli)?;
            let task = match task {
                Some(id) => Some(world.task(id).cloned().ok_or_else(|| usage(format!("world has no task {id:?}")))?),
                None => None,
            };
            Ok(Arc::new(move || {
                let dev = match &task {
                    Some(t) => SimDevice::for_task(world.clone(), t),
                    None => SimDevice::new(world.clone()),
                };
                Ok(Box::new(dev) as Box<dyn Device>)
            }))
        }
        DeviceSpec::Adb(serial) => {
            let packages: std::collections::HashMap<String, String> = settings.packages.clone().into_iter().collect();
            Ok(Arc::new(move || {
                AdbDevice::connect(serial.clone(), SystemRunner, packages.clone()).map(|d| Box::new(d) as Box<dyn Device>)
            }))
        }
    }
}

fn gateway(settings: &Settings, script: Option<&Path>) -> Result<Box<dyn ChatBackend>, Failure> {
    match script {
        Some(path) => ScriptedBackend::from_file(path).map(|b| Box::new(b) as Box<dyn ChatBackend>).map_err(usage),
        None => settings.model.backend().map(|b| Box::new(b) as Box<dyn ChatBackend>).map_err(usage),
    }
}

fn agents(dir: Option<&Path>) -> Result<Agents, Failure> {
    Agents::from_template_dir(dir).map_err(usage)
}

fn open_store(path: Option<&Path>) -> Result<KnowledgeStore, Failure> {
    match path {
        Some(p) => KnowledgeStore::open(p).map_err(usage),
        None => Ok(KnowledgeStore::in_memory()),
    }
}

fn run_config(cli: &Cli, settings: &Settings, flags: &args::RunFlags) -> Result<RunConfig, Failure> {
    let mut config = settings.run.clone();
    flags.apply(&mut config);
    if cli.trace_dir.is_some() {
        config.trace_dir = cli.trace_dir.clone();
    }
    config.validate().map_err(usage)?;
    Ok(config)
}

fn run(cli: &Cli, settings: Settings, a: &RunArgs) -> Outcome {
    let config = run_config(cli, &settings, &a.flags)?;
    let sim_task = match (&a.task, device_spec(&cli.device)?) {
        (Some(id), DeviceSpec::Sim) => {
            Some(load_world(cli)?.task(id).cloned().ok_or_else(|| usage(format!("world has no task {id:?}")))?)
        }
        (Some(_), DeviceSpec::Adb(_)) => return Err(usage("--task needs the sim device")),
        (None, _) => None,
    };
    let text = a
        .instruction
        .clone()
        .or_else(|| sim_task.as_ref().map(|t| t.instruction.clone()))
        .ok_or_else(|| usage("give an instruction or --task"))?;
    let mut instruction = Instruction::new(text).map_err(usage)?;
    if let Some(app) = a.app.clone().or_else(|| sim_task.as_ref().and_then(|t| t.app.clone())) {
        instruction = instruction.with_app_hint(app);
    }
    let agents = agents(config.template_dir.as_deref())?;
    let backend = gateway(&settings, a.script.as_deref())?;
    let store = open_store(a.knowledge.as_deref().or(settings.knowledge_path.as_deref()))?;

    let mut device = match device_spec(&cli.device)? {
        DeviceSpec::Sim => {
            let world = load_world(cli)?;
            RunDevice::Sim(match &sim_task {
                Some(t) => SimDevice::for_task(world, t),
                None => SimDevice::new(world),
            })
        }
        DeviceSpec::Adb(_) => RunDevice::Other((device_factory(cli, &settings, None)?)().map_err(environment)?),
    };

    let run_id = a.run_id.clone().unwrap_or_else(|| format!("run-{}", chrono::Utc::now().format("%Y%m%d-%H%M%S")));
    let trace_root = config.trace_dir.clone();
    let json = a.json;
    let printer = move |r: &TraceRecord| {
        let text = if json {
            r.to_json()
        } else {
            let root = trace_root.clone();
            let run_id = r.run_id.clone();
            render::line(r, &move |s: &str| match &root {
                Some(dir) => dir.join(&run_id).join(s).display().to_string(),
                None => s.to_string(),
            })
        };
        let mut out = std::io::stdout().lock();
        let _ = writeln!(out, "{text}");
    };
    let orch = Orchestrator::new(&config, &agents, backend.as_ref()).with_store(&store);
    let dev: &mut dyn Device = match &mut device {
        RunDevice::Sim(d) => d,
        RunDevice::Other(d) => d.as_mut(),
    };
    let result =
        run_task(&orch, &instruction, dev, &run_id, vec![Box::new(printer)], &AbortFlag::new()).map_err(environment)?;

    let mut ok = result.status == RunStatus::Success;
    if let (Some(task), RunDevice::Sim(d)) = (&sim_task, &device) {
        let passed = check_success(task, d.state(), &result);
        eprintln!("task {}: goal {}", task.id, if passed { "reached" } else { "not reached" });
        ok &= passed;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

enum RunDevice {
    Sim(SimDevice),
    Other(Box<dyn Device>),
}

fn explore(cli: &Cli, settings: Settings, a: &ExploreArgs) -> Outcome {
    let mut config = settings.exploration.clone();
    a.apply(&mut config);
    if cli.trace_dir.is_some() {
        config.trace_dir = cli.trace_dir.clone();
    }
    config.validate().map_err(usage)?;
    let out = a
        .out
        .as_deref()
        .or(settings.knowledge_path.as_deref())
        .ok_or_else(|| usage("give --out <file> or set knowledge_path"))?;
    let store = KnowledgeStore::open(out).map_err(usage)?;
    let agents = agents(a.template_dir.as_deref().or(settings.run.template_dir.as_deref()))?;
    let backend = gateway(&settings, a.script.as_deref())?;
    let mut device = (device_factory(cli, &settings, None)?)().map_err(environment)?;
    let report = Explorer::new(&config, &agents, backend.as_ref(), &store).run(&mut device).map_err(usage)?;
    for e in &report.episodes {
        let err = e.error.as_deref().map(|m| format!("  error: {m}")).unwrap_or_default();
        println!("{:<24} {:>3} steps {:>3} items  {:?}{err}", e.id, e.steps, e.items_added, e.end);
    }
    for t in report.totals() {
        println!(
            "{}: {} episodes ({} aborted), {} steps, {} items added",
            t.app, t.episodes, t.aborted, t.steps, t.items_added
        );
    }
    println!("knowledge store {} now holds {} items", out.display(), store.len());
    let all_aborted = report.episodes.iter().all(|e| e.end == EpisodeEnd::Aborted);
    Ok(if all_aborted { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

fn bench(settings: Settings, a: &BenchArgs) -> Outcome {
    let mut base = settings.run.clone();
    a.flags.apply(&mut base);
    base.validate().map_err(usage)?;
    let suite = BenchSuite::load(&a.suite).map_err(usage)?;
    let ablation = run_suite(&suite, &base).map_err(usage)?;
    let thetas = if a.thetas.is_empty() { SWEEP_THETAS.to_vec() } else { a.thetas.clone() };
    let sweep = theta_sweep(&suite, &base, &thetas).map_err(usage)?;
    if a.json {
        let doc = serde_json::json!({ "ablation": ablation, "theta_sweep": sweep });
        println!("{}", serde_json::to_string_pretty(&doc).expect("reports serialize"));
        return Ok(ExitCode::SUCCESS);
    }
    println!("Success by difficulty ({} tasks, max {} steps)\n", suite.tasks.len(), suite.max_steps);
    print!("{}", ablation.render_table());
    println!("\nFailures by label\n");
    print!("{}", ablation.render_failures());
    println!("\nThreshold sweep (all reflectors on)\n");
    print!("{}", sweep_table(&sweep));
    println!("\n{:.1} s", (ablation.elapsed + sweep.elapsed).as_secs_f64());
    Ok(ExitCode::SUCCESS)
}

fn sweep_table(report: &BenchReport) -> String {
    let mut out = format!("{:>10} {:>9} {:>12} {:>7}\n", "theta", "success", "reflections", "steps");
    for row in &report.rows {
        let reflections: usize = row.outcomes.iter().map(|o| o.action_reflections).sum();
        out.push_str(&format!(
            "{:>10} {:>9} {:>12} {:>7}\n",
            row.theta,
            format!("{}/{}", row.successes(), row.outcomes.len()),
            reflections,
            row.steps()
        ));
    }
    out
}

fn replay(a: &ReplayArgs) -> Outcome {
    let path = if a.trace.is_dir() { a.trace.join(TRACE_FILE) } else { a.trace.clone() };
    let records = read_trace(&path).map_err(usage)?;
    let dir: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if let Some(n) = a.step {
        if !records.iter().any(|r| r.event.step() == Some(n)) {
            return Err(usage(format!("step {n} is not in {}", path.display())));
        }
    }
    let shot = |name: &str| {
        let p = dir.join(name);
        if p.exists() {
            p.display().to_string()
        } else {
            format!("{} (missing)", p.display())
        }
    };
    let mut out = std::io::stdout().lock();
    for r in &records {
        if a.step.is_some() && r.event.step() != a.step {
            continue;
        }
        let _ = writeln!(out, "{}", render::line(r, &shot));
    }
    let status = records.iter().rev().find_map(|r| match &r.event {
        RunEvent::RunFinished { status, .. } => Some(*status),
        _ => None,
    });
    if a.step.is_none() {
        if let Some(status) = status {
            let _ = writeln!(out, "trace {}: {} records, {}", path.display(), records.len(), status.as_str());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(cli: &Cli, settings: Settings, a: &ServeArgs) -> Outcome {
    let run = run_config(cli, &settings, &a.flags)?;
    let agents = agents(run.template_dir.as_deref())?;
    let knowledge = a.knowledge.as_deref().or(settings.knowledge_path.as_deref());
    let store = Arc::new(open_store(knowledge)?);
    let device = match device_factory(cli, &settings, None) {
        Ok(f) => Some(f),
        Err(f) if f.code == 2 && cli.world.is_none() && cli.device == "sim" => {
            tracing::warn!("no --world given; runs will answer 503");
            None
        }
        Err(f) => return Err(f),
    };
    let gateway: GatewayFactory = match &a.script {
        Some(path) => {
            ScriptedBackend::from_file(path).map_err(usage)?;
            let path = path.clone();
            Arc::new(move || ScriptedBackend::from_file(&path).map(|b| Box::new(b) as Box<dyn ChatBackend>))
        }
        None => {
            let model = settings.model.clone();
            Arc::new(move || model.backend().map(|b| Box::new(b) as Box<dyn ChatBackend>))
        }
    };
    let mut exploration = settings.exploration.clone();
    if cli.trace_dir.is_some() {
        exploration.trace_dir = cli.trace_dir.clone();
    }
    let bind = a.bind.clone().unwrap_or_else(|| settings.service_bind.clone());
    let service = Service::new(ServiceConfig {
        run,
        exploration,
        agents,
        gateway,
        device,
        store,
        console_dir: a.console_dir.clone().or(settings.console_dir.clone()),
    });
    let rt = tokio::runtime::Runtime::new().map_err(environment)?;
    rt.block_on(deckhand_service::serve(service, &bind)).map_err(environment)?;
    Ok(ExitCode::SUCCESS)
}

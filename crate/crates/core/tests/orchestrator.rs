mod common;

use common::*;
use deckhand_core::agents::Agents;
use deckhand_core::device::sim::check_success;
use deckhand_core::device::SimDevice;
use deckhand_core::domain::{Instruction, ReflectionLevel, RunResult, RunStatus, Verdict};
use deckhand_core::gateway::{ScriptEntry, ScriptedBackend};
use deckhand_core::orchestrator::{
    normalize_timestamps, read_trace, AbortFlag, MemorySink, Orchestrator, Recorder, RunConfig,
    RunEvent, TraceRecord, TraceWriter, TRACE_FILE,
};

const OPEN: &str = r#"{"action_type": "open", "text": "Files"}"#;
const ROW: &str = r#"{"action_type": "click", "coordinate": [180, 80]}"#;
const FIELD: &str = r#"{"action_type": "click", "coordinate": [180, 90]}"#;
const TYPE: &str = r#"{"action_type": "type", "text": "report.txt"}"#;
const CLEAR: &str = r#"{"action_type": "clear_text"}"#;
const OK_BTN: &str = r#"{"action_type": "click", "coordinate": [60, 150]}"#;
const DONE: &str = r#"{"action_type": "terminate", "status": "success"}"#;
const GAVE_UP: &str = r#"{"action_type": "terminate", "status": "failure"}"#;

struct Outcome {
    result: RunResult,
    records: Vec<TraceRecord>,
    state_ok: bool,
    executed: usize,
    backend: Recording<ScriptedBackend>,
}

fn run_with(config: &RunConfig, script: Vec<ScriptEntry>, abort_after_progress: Option<usize>) -> Outcome {
    let world = files_world();
    let task = world.task("rename_file").unwrap().clone();
    let mut device = Counting::new(SimDevice::for_task(world.clone(), &task));
    let backend = Recording::new(ScriptedBackend::load(script).unwrap());
    let agents = Agents::default();
    let mem = MemorySink::default();
    let abort = AbortFlag::new();
    let trip = abort.clone();
    let mut rec = Recorder::new("run-test")
        .with_clock(|| "T".into())
        .with_sink(mem.clone())
        .with_sink(move |r: &TraceRecord| {
            if let (Some(n), RunEvent::ProgressUpdated { step, .. }) = (abort_after_progress, &r.event) {
                if *step == n {
                    trip.set();
                }
            }
        });
    let instruction = Instruction::new(&task.instruction).unwrap();
    let result = Orchestrator::new(config, &agents, &backend).run(&instruction, &mut device, &mut rec, &abort);
    let state_ok = check_success(&task, device.inner.state(), &result);
    Outcome { state_ok, executed: device.count(), records: mem.records(), result, backend }
}

fn kinds(records: &[TraceRecord]) -> Vec<&'static str> {
    records.iter().map(|r| r.event.kind()).collect()
}

fn count(records: &[TraceRecord], kind: &str) -> usize {
    records.iter().filter(|r| r.event.kind() == kind).count()
}

fn happy_script() -> Vec<ScriptEntry> {
    vec![
        op(OPEN, HIGH),
        progress("opened Files"),
        op(ROW, HIGH),
        progress("opened the file"),
        op(DONE, HIGH),
        verdict("global_reflector", "VERDICT: OK\nDone."),
    ]
}

#[test]
fn happy_path_succeeds_in_three_steps() {
    let out = run_with(&RunConfig::default(), happy_script(), None);
    assert_eq!(out.result.status, RunStatus::Success);
    assert_eq!(out.result.steps.len(), 3);
    assert_eq!(out.executed, 2, "terminate never touches the device");
    assert!(out.result.steps[2].screenshot_after.is_none());
    assert_eq!(count(&out.records, "terminate_intercepted"), 1);
    assert_eq!(*kinds(&out.records).last().unwrap(), "run_finished");
    assert_eq!(out.backend.inner.remaining(), 0);
}

#[test]
fn incomplete_verdict_sends_the_operator_back() {
    let script = vec![
        op(OPEN, HIGH),
        progress("opened Files"),
        op(DONE, HIGH),
        verdict("global_reflector", "VERDICT: INCOMPLETE\nThe file was never opened."),
        progress("asked to continue"),
        op(ROW, HIGH),
        progress("opened the file"),
        op(DONE, HIGH),
        verdict("global_reflector", "VERDICT: OK"),
    ];
    let out = run_with(&RunConfig::default(), script, None);
    assert_eq!(out.result.status, RunStatus::Success);
    assert_eq!(count(&out.records, "terminate_intercepted"), 2);
    let rejected = &out.result.steps[1];
    assert_eq!(rejected.reflection(ReflectionLevel::Global).unwrap().verdict, Verdict::Incomplete);
    assert!(rejected.screenshot_after.is_none());
    // The operator saw the global feedback on the following step.
    let ops = out.backend.tagged("operator");
    assert!(ops[2].full_text().contains("The file was never opened."));
}

#[test]
fn global_window_is_clamped_at_the_start() {
    let script = vec![
        op(OPEN, HIGH),
        progress("opened Files"),
        op(DONE, HIGH),
        verdict("global_reflector", "VERDICT: OK"),
    ];
    let out = run_with(&RunConfig::default(), script, None);
    let global = out.backend.tagged("global_reflector");
    assert_eq!(global.len(), 1);
    assert_eq!(global[0].image_count(), 2, "t=1 shows s0 and s1");
}

#[test]
fn fourth_incomplete_verdict_is_accepted_with_warning() {
    let mut script = Vec::new();
    for _ in 0..3 {
        script.push(op(DONE, HIGH));
        script.push(verdict("global_reflector", "VERDICT: INCOMPLETE\nNot finished."));
        script.push(progress("still going"));
    }
    script.push(op(DONE, HIGH));
    script.push(verdict("global_reflector", "VERDICT: INCOMPLETE\nNot finished."));
    let out = run_with(&RunConfig::default(), script, None);
    assert_eq!(out.result.status, RunStatus::Success);
    assert_eq!(out.result.steps.len(), 4);
    let last = out.records.iter().rev().find(|r| r.event.kind() == "terminate_intercepted").unwrap();
    assert!(matches!(last.event, RunEvent::TerminateIntercepted { accepted: true, verdict: Verdict::Incomplete, .. }));
    assert!(out.records.iter().any(|r| matches!(&r.event, RunEvent::Warning { message, .. } if message.contains("4 incomplete"))));
}

#[test]
fn terminate_failure_passes_through() {
    let script = vec![op(GAVE_UP, HIGH), verdict("global_reflector", "VERDICT: OK")];
    let out = run_with(&RunConfig::default(), script, None);
    assert_eq!(out.result.status, RunStatus::Failure);
    assert_eq!(out.result.failure_label, None);
}

#[test]
fn global_reflector_disabled_accepts_immediately() {
    let config = RunConfig { enable_global_reflector: false, ..RunConfig::default() };
    let script = vec![op(DONE, HIGH)];
    let out = run_with(&config, script, None);
    assert_eq!(out.result.status, RunStatus::Success);
    assert!(out.backend.tagged("global_reflector").is_empty());
}

/// The operator types the new name on top of the prefilled one. Only the
/// action reflector can notice.
fn rename_script(with_reflector: bool) -> Vec<ScriptEntry> {
    let mut s = vec![
        op(OPEN, HIGH),
        progress("opened Files"),
        op(ROW, HIGH),
        progress("rename dialog open"),
        op(FIELD, HIGH),
        progress("name field focused"),
        op(TYPE, LOW),
    ];
    if with_reflector {
        s.push(verdict(
            "action_reflector",
            "VERDICT: ERROR\nThe input box still shows the default name in front of the new one.\nSUGGESTION: Clear the field, then type the name again.",
        ));
        s.push(progress("typed, but the old name remains"));
        s.push(op(CLEAR, HIGH));
        s.push(progress("field cleared"));
        s.push(op(TYPE, HIGH));
    }
    s.push(progress("typed report.txt"));
    s.push(op(OK_BTN, HIGH));
    s.push(progress("confirmed"));
    s.push(op(DONE, HIGH));
    s.push(verdict("global_reflector", "VERDICT: OK"));
    s
}

#[test]
fn action_reflection_recovers_the_rename() {
    let on = run_with(&RunConfig::default(), rename_script(true), None);
    assert_eq!(on.result.status, RunStatus::Success);
    assert!(on.state_ok);
    assert_eq!(on.result.reflection_count(ReflectionLevel::Action), 1);
    let ops = on.backend.tagged("operator");
    assert!(ops[4].full_text().contains("Clear the field, then type the name again."));

    let config = RunConfig { enable_action_reflector: false, ..RunConfig::default() };
    let off = run_with(&config, rename_script(false), None);
    assert_eq!(off.result.status, RunStatus::Success, "the run believes it succeeded");
    assert!(!off.state_ok);
    assert!(off.records.iter().all(|r| !matches!(&r.event, RunEvent::Reflection { feedback, .. } if feedback.level == ReflectionLevel::Action)));
}

#[test]
fn reflector_receives_raw_before_and_annotated_after() {
    let out = run_with(&RunConfig::default(), rename_script(true), None);
    let reqs = out.backend.tagged("action_reflector");
    assert_eq!(reqs.len(), 1);
    assert_eq!(reqs[0].image_count(), 2);
    assert!(reqs[0].full_text().contains("x="));
}

#[test]
fn event_order_within_steps() {
    let out = run_with(&RunConfig::default(), rename_script(true), None);
    let rank = |k: &str| match k {
        "step_started" => 0,
        "operator_output" => 1,
        "confidence_gated" => 2,
        "action_executed" => 3,
        "reflection" => 4,
        "terminate_intercepted" => 5,
        "progress_updated" => 6,
        _ => -1,
    };
    let mut last: Option<(usize, i32)> = None;
    for r in &out.records {
        let (Some(step), k) = (r.event.step(), rank(r.event.kind())) else { continue };
        if k < 0 {
            continue;
        }
        if let Some((s, prev)) = last {
            assert!(step > s || (step == s && k >= prev), "{:?}", kinds(&out.records));
        }
        last = Some((step, k));
    }
    let seqs: Vec<u64> = out.records.iter().map(|r| r.seq).collect();
    assert_eq!(seqs, (0..out.records.len() as u64).collect::<Vec<_>>());
}

#[test]
fn abort_between_steps() {
    let mut script = Vec::new();
    for _ in 0..6 {
        script.push(op(ROW, HIGH));
        script.push(progress("x"));
    }
    let out = run_with(&RunConfig::default(), script, Some(2));
    assert_eq!(out.result.status, RunStatus::Aborted);
    assert_eq!(out.result.steps.len(), 3);
    assert_eq!(*kinds(&out.records).last().unwrap(), "run_finished");
}

#[test]
fn gateway_failure_ends_the_run_as_failure() {
    let script = vec![op(OPEN, HIGH)];
    let out = run_with(&RunConfig::default(), script, None);
    assert_eq!(out.result.status, RunStatus::Failure);
    assert!(count(&out.records, "warning") >= 1);
    assert_eq!(*kinds(&out.records).last().unwrap(), "run_finished");
}

#[test]
fn max_steps_exhaustion() {
    let config = RunConfig { max_steps: 2, ..RunConfig::default() };
    let script = vec![op(OPEN, HIGH), progress("a"), op(ROW, HIGH), progress("b")];
    let out = run_with(&config, script, None);
    assert_eq!(out.result.status, RunStatus::MaxStepsExceeded);
    assert_eq!(out.result.steps.len(), 2);
}

#[test]
fn repeated_actions_trigger_trajectory_reflection() {
    let script = vec![
        op(FIELD, HIGH),
        progress("a"),
        op(FIELD, HIGH),
        progress("b"),
        op(FIELD, HIGH),
        verdict("trajectory_reflector", "VERDICT: ERROR\nClicking the same empty spot does nothing."),
        progress("c"),
        op(GAVE_UP, HIGH),
        verdict("global_reflector", "VERDICT: OK"),
    ];
    let out = run_with(&RunConfig::default(), script, None);
    assert_eq!(out.result.reflection_count(ReflectionLevel::Trajectory), 1);
    let r = out.records.iter().find(|r| matches!(r.event, RunEvent::Reflection { .. })).unwrap();
    match &r.event {
        RunEvent::Reflection { step, triggers, .. } => {
            assert_eq!(*step, 2);
            assert!(!triggers.is_empty());
        }
        _ => unreachable!(),
    }
}

#[test]
fn trace_on_disk_reproduces_the_event_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let mut traces = Vec::new();
    for _ in 0..2 {
        let world = files_world();
        let task = world.task("rename_file").unwrap().clone();
        let mut device = SimDevice::for_task(world.clone(), &task);
        let backend = ScriptedBackend::load(rename_script(true)).unwrap();
        let agents = Agents::default();
        let config = RunConfig::default();
        let sub = tempfile::tempdir_in(dir.path()).unwrap();
        let mut rec = Recorder::new("fixed").with_sink(TraceWriter::create(sub.path(), "fixed").unwrap());
        Orchestrator::new(&config, &agents, &backend).run(
            &Instruction::new(&task.instruction).unwrap(),
            &mut device,
            &mut rec,
            &AbortFlag::new(),
        );
        drop(rec);
        let path = sub.path().join("fixed").join(TRACE_FILE);
        read_trace(&path).unwrap();
        traces.push(normalize_timestamps(&std::fs::read_to_string(&path).unwrap()));
        let shot = std::fs::read(sub.path().join("fixed/shots/0.png")).unwrap();
        assert!(!shot.is_empty());
    }
    assert_eq!(traces[0], traces[1]);
}

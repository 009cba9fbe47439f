use std::path::PathBuf;

use deckhand_core::bench::{run_bench_task, run_suite, theta_sweep, BenchSuite, SWEEP_THETAS};
use deckhand_core::domain::{FailureType, RunStatus};
use deckhand_core::orchestrator::RunConfig;

fn suite() -> BenchSuite {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../worlds/bench_suite.toml");
    BenchSuite::load(&path).unwrap()
}

#[test]
fn ablation_success_counts() {
    let report = run_suite(&suite(), &RunConfig::default()).unwrap();
    let got: Vec<(&str, usize)> = report.rows.iter().map(|r| (r.name.as_str(), r.successes())).collect();
    assert_eq!(
        got,
        [("Base", 2), ("+Action", 4), ("+Trajectory", 7), ("+Global", 11), ("+Reflection-on-Demand", 11)]
    );
    let on_demand = report.row("+Reflection-on-Demand").unwrap();
    assert!(on_demand.action_reflection_rate() <= 0.5, "{}", on_demand.action_reflection_rate());
    assert!(report.row("+Action").unwrap().action_reflection_rate() > 0.5);
    // Only the misread answer survives every reflector.
    assert_eq!(on_demand.failures(FailureType::Perception), 1);
    let base = report.row("Base").unwrap();
    assert_eq!(base.failures(FailureType::Planning), 4);
    assert_eq!(base.failures(FailureType::Navigation), 3);
}

#[test]
fn theta_sweep_counts() {
    let report = theta_sweep(&suite(), &RunConfig::default(), &SWEEP_THETAS).unwrap();
    let got: Vec<usize> = report.rows.iter().map(|r| r.successes()).collect();
    assert_eq!(got, [11, 11, 10, 9]);
    let rates: Vec<f64> = report.rows.iter().map(|r| r.action_reflection_rate()).collect();
    assert!(rates.windows(2).all(|w| w[0] >= w[1]), "{rates:?}");
}

#[test]
fn a_stuck_task_without_trajectory_feedback_hits_the_step_cap() {
    let s = suite();
    let task = s.tasks.iter().find(|t| t.task == "note_eggs").unwrap();
    let cfg = RunConfig::default().base();
    let out = run_bench_task(&s, task, &cfg);
    assert_eq!(out.status, RunStatus::MaxStepsExceeded);
    assert_eq!(out.steps, s.max_steps);
    assert_eq!(out.failure_label, Some(FailureType::Navigation));
}

#[test]
fn runs_are_deterministic() {
    let s = suite();
    let a = run_suite(&s, &RunConfig::default()).unwrap();
    let b = run_suite(&s, &RunConfig::default()).unwrap();
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.render_table(), b.render_table());
}

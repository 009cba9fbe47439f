use std::path::{Path, PathBuf};
use std::io::{BufRead, BufReader};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use deckhand_core::gateway::ScriptEntry;
use deckhand_core::orchestrator::{read_trace, RunEvent, TRACE_FILE};

const ENV_KEYS: &[&str] = &[
    "MODEL_BASE_URL",
    "MODEL_API_KEY",
    "MODEL_NAME",
    "MODEL_TIMEOUT_SECS",
    "MODEL_MAX_RETRIES",
    "GATE_THETA",
    "GATE_TRAJECTORY_WINDOW",
    "GATE_REPEAT_ACTION_COUNT",
    "GATE_REPEAT_SCREEN_COUNT",
    "GATE_SCREEN_SAME_THRESHOLD",
    "GATE_ACCUMULATED_ERROR_COUNT",
    "KNOWLEDGE_PATH",
    "TEMPLATE_DIR",
    "TRACE_DIR",
    "SERVICE_BIND",
];

fn worlds() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../worlds")
}

fn deckhand(args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_deckhand"));
    for key in ENV_KEYS {
        cmd.env_remove(key);
    }
    cmd.args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_script(dir: &Path, name: &str, entries: &[ScriptEntry]) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(entries).unwrap()).unwrap();
    path
}

fn op(action: &str) -> ScriptEntry {
    ScriptEntry::reply(format!("Thought: next\nAction: {action}\nDescription: do {action}"))
        .matching("[role: operator]")
        .with_uniform_logprob(-0.0001)
}

/// Runs the scripted rename task and returns the trace directory root.
fn rename(extra: &[&str]) -> (tempfile::TempDir, Output) {
    let dir = tempfile::tempdir().unwrap();
    let world = worlds().join("files.toml");
    let script = worlds().join("scripts/rename_file.json");
    let mut args = vec!["--world", s(&world), "--trace-dir", s(dir.path()), "run", "--task", "rename_file"];
    args.extend(["--script", s(&script), "--run-id", "demo"]);
    let args: Vec<&str> = args.into_iter().chain(extra.iter().copied()).collect();
    let out = deckhand(&args);
    (dir, out)
}

#[test]
fn scripted_rename_succeeds_and_writes_a_trace() {
    let (dir, out) = rename(&[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stderr(&out).contains("task rename_file: goal reached"));
    let text = stdout(&out);
    assert!(text.contains("finished: success after 7 steps"), "{text}");
    let records = read_trace(&dir.path().join("demo").join(TRACE_FILE)).unwrap();
    assert_eq!(records.first().unwrap().event.kind(), "run_started");
    assert_eq!(records.last().unwrap().event.kind(), "run_finished");
    for r in &records {
        if let Some(shot) = r.event.screenshot() {
            assert!(dir.path().join("demo").join(shot).is_file(), "{shot}");
        }
    }
}

#[test]
fn json_mode_prints_trace_records() {
    let (dir, out) = rename(&["--json"]);
    assert_eq!(code(&out), 0);
    let printed: Vec<String> = stdout(&out).lines().map(String::from).collect();
    let stored = std::fs::read_to_string(dir.path().join("demo").join(TRACE_FILE)).unwrap();
    assert_eq!(printed, stored.lines().map(String::from).collect::<Vec<_>>());
}

#[test]
fn disabling_the_global_reflector_removes_its_reflections() {
    let (dir, out) = rename(&["--no-global-reflector"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let records = read_trace(&dir.path().join("demo").join(TRACE_FILE)).unwrap();
    assert!(records.iter().any(|r| matches!(r.event, RunEvent::TerminateIntercepted { .. })));
    assert!(!records.iter().any(|r| match &r.event {
        RunEvent::Reflection { feedback, .. } => format!("{:?}", feedback.level) == "Global",
        _ => false,
    }));
}

#[test]
fn missing_world_is_a_usage_error() {
    let out = deckhand(&["--world", "/nonexistent/world.toml", "run", "hello", "--script", "x.json"]);
    assert_eq!(code(&out), 2);
    let out = deckhand(&["run", "hello"]);
    assert_eq!(code(&out), 2, "sim needs --world: {}", stderr(&out));
}

#[test]
fn no_gateway_configured_is_a_usage_error() {
    let world = worlds().join("files.toml");
    let out = deckhand(&["--world", s(&world), "run", "Rename the file"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("MODEL_"), "{}", stderr(&out));
}

#[test]
fn giving_up_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(
        dir.path(),
        "give_up.json",
        &[
            op(r#"{"action_type": "terminate", "status": "failure"}"#),
            ScriptEntry::reply("VERDICT: OK\nNothing can be done.").matching("[role: global_reflector]"),
        ],
    );
    let world = worlds().join("files.toml");
    let out = deckhand(&["--world", s(&world), "run", "--task", "rename_file", "--script", s(&script)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stdout(&out).contains("finished: failure"));
    assert!(stderr(&out).contains("goal not reached"));
}

#[test]
fn replay_prints_a_trace_and_single_steps() {
    let (dir, out) = rename(&[]);
    assert_eq!(code(&out), 0);
    let run_dir = dir.path().join("demo");
    let all = deckhand(&["replay", s(&run_dir)]);
    assert_eq!(code(&all), 0, "{}", stderr(&all));
    let text = stdout(&all);
    assert!(text.lines().last().unwrap().ends_with("success"), "{text}");
    assert!(!text.contains("(missing)"));

    let one = deckhand(&["replay", s(&run_dir.join(TRACE_FILE)), "--step", "3"]);
    assert_eq!(code(&one), 0);
    let text = stdout(&one);
    let lines: Vec<&str> = text.lines().map(str::trim_start).collect();
    assert!(!lines.is_empty());
    assert!(lines.iter().all(|l| l.split_once(' ').unwrap().1.starts_with("step 3 ")), "{lines:?}");

    assert_eq!(code(&deckhand(&["replay", s(&run_dir), "--step", "99"])), 2);
}

#[test]
fn replay_rejects_a_truncated_trace() {
    let (dir, _) = rename(&[]);
    let full = std::fs::read_to_string(dir.path().join("demo").join(TRACE_FILE)).unwrap();
    let cut: Vec<&str> = full.lines().take(4).collect();
    let path = dir.path().join("cut.jsonl");
    std::fs::write(&path, cut.join("\n") + "\n").unwrap();
    let out = deckhand(&["replay", s(&path)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("cut.jsonl:5"), "{}", stderr(&out));

    std::fs::write(&path, "{not json\n").unwrap();
    let out = deckhand(&["replay", s(&path)]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("cut.jsonl:1"), "{}", stderr(&out));
}

#[test]
fn bench_reports_on_a_small_suite() {
    let dir = tempfile::tempdir().unwrap();
    let suite = dir.path().join("suite.toml");
    std::fs::write(
        &suite,
        format!(
            r#"world = "{}"
[[tasks]]
task = "wifi_on"
plan = [
  '{{"action_type": "open", "text": "Settings"}}',
  '{{"action_type": "click", "coordinate": [180, 82]}}',
  '{{"action_type": "terminate", "status": "success"}}',
]
"#,
            worlds().join("bench.toml").display()
        ),
    )
    .unwrap();
    let out = deckhand(&["bench", "--suite", s(&suite), "--thetas", "-inf,0", "--json"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let rows = doc["ablation"]["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    let sweep = doc["theta_sweep"]["rows"].as_array().unwrap();
    assert_eq!(sweep.iter().map(|r| r["name"].as_str().unwrap()).collect::<Vec<_>>(), ["theta=-inf", "theta=0"]);
    assert!(rows.iter().all(|r| r["outcomes"][0]["success"] == true));

    let text = deckhand(&["bench", "--suite", s(&suite), "--theta", "-0.01"]);
    assert_eq!(code(&text), 0);
    assert!(stdout(&text).contains("Reflection-on-Demand"));

    std::fs::write(&suite, format!("world = \"{}\"\n", worlds().join("bench.toml").display())).unwrap();
    assert_eq!(code(&deckhand(&["bench", "--suite", s(&suite)])), 2);
}

#[test]
fn help_lists_every_run_flag() {
    let out = deckhand(&["run", "--help"]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for flag in [
        "--task",
        "--app",
        "--script",
        "--knowledge",
        "--run-id",
        "--json",
        "--max-steps",
        "--theta",
        "--trajectory-window",
        "--repeat-action-count",
        "--repeat-screen-count",
        "--screen-same-threshold",
        "--accumulated-error-count",
        "--knowledge-limit",
        "--global-max-rejections",
        "--diff-block-size",
        "--diff-threshold",
        "--no-action-reflector",
        "--no-trajectory-reflector",
        "--no-global-reflector",
        "--template-dir",
        "--config",
        "--device",
        "--world",
        "--trace-dir",
    ] {
        assert!(text.contains(flag), "missing {flag}");
    }
    assert_eq!(code(&deckhand(&["run", "--bogus"])), 2);
}

#[test]
fn invalid_flag_values_are_usage_errors() {
    let world = worlds().join("files.toml");
    let script = worlds().join("scripts/rename_file.json");
    let out = deckhand(&["--world", s(&world), "run", "x", "--script", s(&script), "--theta", "0.5"]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    let out = deckhand(&["--world", s(&world), "--device", "usb", "run", "x", "--script", s(&script)]);
    assert_eq!(code(&out), 2);
}

#[test]
fn exploration_fills_a_knowledge_file() {
    let dir = tempfile::tempdir().unwrap();
    let explore = |a: &str| {
        ScriptEntry::reply(format!("Thought: look\nAction: {a}\nDescription: try"))
            .matching("[role: explorer]")
            .with_uniform_logprob(-0.0001)
    };
    let critic = |t: &str| ScriptEntry::reply(format!("GUIDANCE: {t}")).matching("[role: critic]");
    let script = write_script(
        dir.path(),
        "explore.json",
        &[
            explore(r#"{"action_type": "click", "coordinate": [180, 80]}"#),
            critic("try cancel"),
            explore(r#"{"action_type": "click", "coordinate": [180, 150]}"#),
            critic("stop"),
            explore(r#"{"action_type": "terminate", "status": "success"}"#),
            ScriptEntry::reply("- Tapping a file opens a rename dialog [tags: rename]\n- Cancel closes the dialog")
                .matching("[role: summary]"),
        ],
    );
    let knowledge = dir.path().join("knowledge.jsonl");
    let world = worlds().join("files.toml");
    let out = deckhand(&[
        "--world",
        s(&world),
        "explore",
        "--apps",
        "Files",
        "--episodes",
        "1",
        "--max-steps",
        "5",
        "--out",
        s(&knowledge),
        "--script",
        s(&script),
    ]);
    assert_eq!(code(&out), 0, "{}\n{}", stdout(&out), stderr(&out));
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(&knowledge)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["app"], "Files");
    assert_eq!(lines[0]["tags"][0], "rename");
    assert!(stdout(&out).contains("now holds 2 items"));

    let out = deckhand(&["--world", s(&world), "explore", "--apps", "Files", "--script", s(&script)]);
    assert_eq!(code(&out), 2, "no --out and no knowledge_path");
}

/// Kills the server when the test ends, pass or fail.
struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn serve(global: &[&str], args: &[&str]) -> (Server, String) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_deckhand"));
    for key in ENV_KEYS {
        cmd.env_remove(key);
    }
    let mut child = cmd
        .env("DECKHAND_LOG", "info")
        .args(global)
        .args(["serve", "--bind", "127.0.0.1:0"])
        .args(args)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let server = Server(child);
    let base = loop {
        let line = lines.next().expect("server exited before listening").unwrap();
        if let Some(at) = line.find("http://") {
            break line[at..].trim().to_string();
        }
    };
    std::thread::spawn(move || for _ in lines {});
    (server, base)
}

#[test]
fn serve_runs_scripted_tasks_over_http() {
    let world = worlds().join("files.toml");
    let script = worlds().join("scripts/rename_file.json");
    let (_server, base) = serve(&["--world", s(&world)], &["--script", s(&script)]);
    let client = reqwest::blocking::Client::new();
    let health: serde_json::Value = client.get(format!("{base}/api/health")).send().unwrap().json().unwrap();
    assert_eq!(health["device"], "available");

    let resp = client
        .post(format!("{base}/api/runs"))
        .json(&serde_json::json!({ "instruction": "Rename the file draft.txt to report.txt", "app_hint": "Files" }))
        .send()
        .unwrap();
    assert_eq!(resp.status().as_u16(), 201);
    let id = resp.json::<serde_json::Value>().unwrap()["run_id"].as_str().unwrap().to_string();
    let deadline = Instant::now() + Duration::from_secs(20);
    let status = loop {
        let run: serde_json::Value = client.get(format!("{base}/api/runs/{id}")).send().unwrap().json().unwrap();
        if run["status"] != "running" || Instant::now() > deadline {
            break run["status"].clone();
        }
        std::thread::sleep(Duration::from_millis(50));
    };
    assert_eq!(status, "success");
}

#[test]
fn serve_without_a_world_answers_503() {
    let (_server, base) = serve(&[], &[]);
    let client = reqwest::blocking::Client::new();
    let health: serde_json::Value = client.get(format!("{base}/api/health")).send().unwrap().json().unwrap();
    assert_eq!(health["device"], "none");
    let resp = client.post(format!("{base}/api/runs")).json(&serde_json::json!({ "instruction": "hi" })).send().unwrap();
    assert_eq!(resp.status().as_u16(), 503);
}

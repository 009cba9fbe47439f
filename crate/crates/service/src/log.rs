//! Per-run event logs that any number of SSE clients read from.
//!
//! The run appends; each client keeps its own cursor into the log, so a slow
//! client only falls behind and never holds up the run.

use std::sync::{Arc, Mutex};

use axum::response::sse::Event;
use chrono::{DateTime, Utc};
use deckhand_core::domain::{RunResult, RunStatus, Screenshot};
use deckhand_core::orchestrator::{EventSink, RunEvent, TraceRecord};
use futures::Stream;
use serde::Serialize;
use tokio::sync::watch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HandleStatus {
    Running,
    Success,
    Failure,
    Aborted,
    MaxStepsExceeded,
}

impl From<RunStatus> for HandleStatus {
    fn from(s: RunStatus) -> Self {
        match s {
            RunStatus::Success => HandleStatus::Success,
            RunStatus::Failure => HandleStatus::Failure,
            RunStatus::Aborted => HandleStatus::Aborted,
            RunStatus::MaxStepsExceeded => HandleStatus::MaxStepsExceeded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunHandle {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub status: HandleStatus,
    pub instruction: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    pub steps: usize,
}

#[derive(Default)]
struct Log {
    records: Vec<Arc<str>>,
    /// `run_finished`, published by [`RunEntry::close`] once the device is free.
    held: Option<Arc<str>>,
    closed: bool,
}

pub struct RunEntry {
    handle: Mutex<RunHandle>,
    log: Mutex<Log>,
    shots: Mutex<Vec<Option<Vec<u8>>>>,
    version: watch::Sender<usize>,
}

impl RunEntry {
    pub fn new(handle: RunHandle) -> Arc<Self> {
        Arc::new(Self {
            handle: Mutex::new(handle),
            log: Mutex::default(),
            shots: Mutex::default(),
            version: watch::Sender::new(0),
        })
    }

    pub fn handle(&self) -> RunHandle {
        self.handle.lock().unwrap().clone()
    }

    pub fn run_id(&self) -> String {
        self.handle.lock().unwrap().run_id.clone()
    }

    pub fn is_running(&self) -> bool {
        self.handle.lock().unwrap().status == HandleStatus::Running
    }

    pub fn finish(&self, result: &RunResult) {
        let mut h = self.handle.lock().unwrap();
        h.status = result.status.into();
        h.answer = result.answer.clone();
        h.steps = result.steps.len();
    }

    /// Ends the stream; a run still marked running becomes a failure.
    pub fn close(&self) {
        {
            let mut h = self.handle.lock().unwrap();
            if h.status == HandleStatus::Running {
                h.status = HandleStatus::Failure;
            }
        }
        {
            let mut log = self.log.lock().unwrap();
            if let Some(last) = log.held.take() {
                log.records.push(last);
            }
            log.closed = true;
        }
        self.version.send_modify(|v| *v += 1);
    }

    pub fn push(&self, record: &TraceRecord) {
        let json: Arc<str> = public_json(record, &self.run_id()).into();
        let mut log = self.log.lock().unwrap();
        if matches!(record.event, RunEvent::RunFinished { .. }) {
            log.held = Some(json);
            return;
        }
        log.records.push(json);
        drop(log);
        self.version.send_modify(|v| *v += 1);
    }

    pub fn shot(&self, n: usize) -> Option<Vec<u8>> {
        self.shots.lock().unwrap().get(n).cloned().flatten()
    }

    /// Records with `seq >= from`, then live ones until the run finishes.
    pub fn stream(self: Arc<Self>, from: usize) -> impl Stream<Item = Result<Event, std::convert::Infallible>> {
        let rx = self.version.subscribe();
        futures::stream::unfold((self, from, rx), |(entry, cursor, mut rx)| async move {
            loop {
                rx.borrow_and_update();
                {
                    let log = entry.log.lock().unwrap();
                    if let Some(data) = log.records.get(cursor) {
                        let event = Event::default().id(cursor.to_string()).data(data.as_ref());
                        drop(log);
                        return Some((Ok(event), (entry, cursor + 1, rx)));
                    }
                    if log.closed {
                        return None;
                    }
                }
                if rx.changed().await.is_err() {
                    return None;
                }
            }
        })
    }

    pub fn sink(self: &Arc<Self>) -> Box<dyn EventSink> {
        Box::new(EntrySink(self.clone()))
    }
}

struct EntrySink(Arc<RunEntry>);

impl EventSink for EntrySink {
    fn on_shot(&mut self, name: &str, shot: &Screenshot) {
        let Some(n) = shot_index(name) else { return };
        let mut shots = self.0.shots.lock().unwrap();
        if shots.len() <= n {
            shots.resize(n + 1, None);
        }
        shots[n] = Some(shot.to_png());
    }

    fn on_record(&mut self, record: &TraceRecord) {
        self.0.push(record);
    }
}

/// `3` from `shots/3.png` or `3.png`.
pub fn shot_index(name: &str) -> Option<usize> {
    let file = name.rsplit('/').next()?;
    file.strip_suffix(".png")?.parse().ok()
}

/// The trace line with its relative screenshot name turned into a service
/// URL. Quotes inside JSON strings are escaped, so the key pattern only
/// matches the real field.
pub fn public_json(record: &TraceRecord, run_id: &str) -> String {
    record.to_json().replacen("\"screenshot\":\"shots/", &format!("\"screenshot\":\"/api/runs/{run_id}/shots/"), 1)
}

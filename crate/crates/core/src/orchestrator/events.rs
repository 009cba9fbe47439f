use std::sync::{Arc, Mutex};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use crate::device::{DeviceInfo, ExecReport};
use crate::domain::{
    Action, FailureType, Progress, ReflectionFeedback, RunStatus, Screenshot, TerminateStatus,
    Verdict,
};
use crate::gate::Trigger;
use crate::perception::BoundingBox;

pub const TRACE_VERSION: u32 = 1;

/// Everything observable about a run, in emission order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RunEvent {
    RunStarted {
        instruction: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        app_hint: Option<String>,
        device: DeviceInfo,
        /// Ids of the retrieved knowledge items.
        knowledge: Vec<String>,
        max_steps: usize,
        reflectors: ReflectorToggles,
    },
    StepStarted {
        step: usize,
        screenshot: String,
    },
    OperatorOutput {
        step: usize,
        thought: String,
        action: Action,
        description: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        confidence: Option<f64>,
    },
    ConfidenceGated {
        step: usize,
        reflect: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        confidence: Option<f64>,
    },
    ActionExecuted {
        step: usize,
        report: ExecReport,
        screenshot: String,
        changed_regions: Vec<BoundingBox>,
    },
    Reflection {
        step: usize,
        feedback: ReflectionFeedback,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        triggers: Vec<Trigger>,
    },
    ProgressUpdated {
        step: usize,
        progress: Progress,
    },
    TerminateIntercepted {
        step: usize,
        status: TerminateStatus,
        verdict: Verdict,
        accepted: bool,
    },
    RunFinished {
        status: RunStatus,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        answer: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        failure_label: Option<FailureType>,
        steps: usize,
    },
    Warning {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step: Option<usize>,
        message: String,
    },
}

impl RunEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            RunEvent::RunStarted { .. } => "run_started",
            RunEvent::StepStarted { .. } => "step_started",
            RunEvent::OperatorOutput { .. } => "operator_output",
            RunEvent::ConfidenceGated { .. } => "confidence_gated",
            RunEvent::ActionExecuted { .. } => "action_executed",
            RunEvent::Reflection { .. } => "reflection",
            RunEvent::ProgressUpdated { .. } => "progress_updated",
            RunEvent::TerminateIntercepted { .. } => "terminate_intercepted",
            RunEvent::RunFinished { .. } => "run_finished",
            RunEvent::Warning { .. } => "warning",
        }
    }

    pub fn step(&self) -> Option<usize> {
        match self {
            RunEvent::StepStarted { step, .. }
            | RunEvent::OperatorOutput { step, .. }
            | RunEvent::ConfidenceGated { step, .. }
            | RunEvent::ActionExecuted { step, .. }
            | RunEvent::Reflection { step, .. }
            | RunEvent::ProgressUpdated { step, .. }
            | RunEvent::TerminateIntercepted { step, .. } => Some(*step),
            RunEvent::Warning { step, .. } => *step,
            RunEvent::RunStarted { .. } | RunEvent::RunFinished { .. } => None,
        }
    }

    /// Relative screenshot paths referenced by this event.
    pub fn screenshot(&self) -> Option<&str> {
        match self {
            RunEvent::StepStarted { screenshot, .. } | RunEvent::ActionExecuted { screenshot, .. } => {
                Some(screenshot)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReflectorToggles {
    pub action: bool,
    pub trajectory: bool,
    pub global: bool,
}

/// One trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub v: u32,
    pub run_id: String,
    pub seq: u64,
    pub ts: String,
    #[serde(flatten)]
    pub event: RunEvent,
}

impl TraceRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("trace records serialize")
    }
}

/// Receives a run's screenshots and records as they happen.
pub trait EventSink: Send {
    /// Called before any record that references `name`.
    fn on_shot(&mut self, _name: &str, _image: &Screenshot) {}

    fn on_record(&mut self, record: &TraceRecord);
}

/// Collects records in memory; clones share the buffer.
#[derive(Debug, Clone, Default)]
pub struct MemorySink {
    records: Arc<Mutex<Vec<TraceRecord>>>,
}

impl MemorySink {
    pub fn records(&self) -> Vec<TraceRecord> {
        self.records.lock().unwrap().clone()
    }
}

impl EventSink for MemorySink {
    fn on_record(&mut self, record: &TraceRecord) {
        self.records.lock().unwrap().push(record.clone());
    }
}

impl<F: FnMut(&TraceRecord) + Send> EventSink for F {
    fn on_record(&mut self, record: &TraceRecord) {
        self(record)
    }
}

type Clock = Box<dyn FnMut() -> String + Send>;

/// Numbers events and screenshots for one run and fans them out to sinks.
pub struct Recorder {
    run_id: String,
    next_seq: u64,
    next_shot: u64,
    sinks: Vec<Box<dyn EventSink>>,
    clock: Clock,
}

impl Recorder {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            next_seq: 0,
            next_shot: 0,
            sinks: Vec::new(),
            clock: Box::new(|| Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)),
        }
    }

    pub fn with_sink(mut self, sink: impl EventSink + 'static) -> Self {
        self.sinks.push(Box::new(sink));
        self
    }

    pub fn add_sink(&mut self, sink: Box<dyn EventSink>) {
        self.sinks.push(sink);
    }

    pub fn with_clock(mut self, clock: impl FnMut() -> String + Send + 'static) -> Self {
        self.clock = Box::new(clock);
        self
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    /// Registers a screenshot and returns its relative path.
    pub fn shot(&mut self, image: &Screenshot) -> String {
        let name = format!("shots/{}.png", self.next_shot);
        self.next_shot += 1;
        for sink in &mut self.sinks {
            sink.on_shot(&name, image);
        }
        name
    }

    pub fn emit(&mut self, event: RunEvent) -> u64 {
        let record = TraceRecord {
            v: TRACE_VERSION,
            run_id: self.run_id.clone(),
            seq: self.next_seq,
            ts: (self.clock)(),
            event,
        };
        self.next_seq += 1;
        for sink in &mut self.sinks {
            sink.on_record(&record);
        }
        record.seq
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Point;

    #[test]
    fn record_layout() {
        let rec = TraceRecord {
            v: 1,
            run_id: "r1".into(),
            seq: 4,
            ts: "2026-01-01T00:00:00.000Z".into(),
            event: RunEvent::OperatorOutput {
                step: 2,
                thought: "t".into(),
                action: Action::Click { coordinate: Point::new(3, 4) },
                description: "d".into(),
                confidence: Some(-0.5),
            },
        };
        let json = rec.to_json();
        assert!(json.starts_with(r#"{"v":1,"run_id":"r1","seq":4,"ts":"2026-01-01T00:00:00.000Z","type":"operator_output","step":2"#), "{json}");
        assert!(json.contains(r#""action":{"action_type":"click","coordinate":[3,4]}"#));
        let back: TraceRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
    }

    #[test]
    fn recorder_numbers_everything() {
        let mem = MemorySink::default();
        let mut r = Recorder::new("x").with_sink(mem.clone()).with_clock(|| "T".into());
        let img = Screenshot::solid(1, 1, crate::domain::Rgb::new(0, 0, 0));
        assert_eq!(r.shot(&img), "shots/0.png");
        assert_eq!(r.shot(&img), "shots/1.png");
        r.emit(RunEvent::Warning { step: None, message: "a".into() });
        r.emit(RunEvent::Warning { step: Some(1), message: "b".into() });
        let seqs: Vec<u64> = mem.records().iter().map(|r| r.seq).collect();
        assert_eq!(seqs, [0, 1]);
    }
}

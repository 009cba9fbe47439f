//! On-disk traces: `<dir>/<run_id>/trace.jsonl` plus `shots/<n>.png`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::events::{EventSink, RunEvent, TraceRecord, TRACE_VERSION};
use crate::domain::Screenshot;

pub const TRACE_FILE: &str = "trace.jsonl";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Schema { path: String, line: usize, message: String },
}

/// Writes a run's trace directory. I/O failures are logged, not raised, so
/// a full disk cannot stop a run; [`TraceWriter::error`] reports the first.
pub struct TraceWriter {
    dir: PathBuf,
    out: Option<BufWriter<File>>,
    error: Option<String>,
}

impl TraceWriter {
    /// Creates `<root>/<run_id>/` and its `shots/` directory.
    pub fn create(root: &Path, run_id: &str) -> Result<Self, TraceError> {
        let dir = root.join(run_id);
        let io = |source| TraceError::Io { path: dir.display().to_string(), source };
        fs::create_dir_all(dir.join("shots")).map_err(io)?;
        let file = File::create(dir.join(TRACE_FILE)).map_err(io)?;
        Ok(Self { dir, out: Some(BufWriter::new(file)), error: None })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn error(&self) -> Option<&str> {
        self.error.as_deref()
    }

    fn fail(&mut self, what: String) {
        tracing::warn!(dir = %self.dir.display(), "trace write failed: {what}");
        self.error.get_or_insert(what);
    }
}

impl EventSink for TraceWriter {
    fn on_shot(&mut self, name: &str, image: &Screenshot) {
        if let Err(e) = fs::write(self.dir.join(name), image.to_png()) {
            self.fail(format!("{name}: {e}"));
        }
    }

    fn on_record(&mut self, record: &TraceRecord) {
        let Some(out) = self.out.as_mut() else { return };
        let res = writeln!(out, "{}", record.to_json()).and_then(|_| out.flush());
        if let Err(e) = res {
            self.fail(format!("{TRACE_FILE}: {e}"));
        }
        if matches!(record.event, RunEvent::RunFinished { .. }) {
            self.out = None;
        }
    }
}

/// Reads and validates a trace: version, one run id, gap-free `seq` from 0,
/// and a final `run_finished`.
pub fn read_trace(path: &Path) -> Result<Vec<TraceRecord>, TraceError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| TraceError::Io { path: p.clone(), source })?;
    let schema = |line: usize, message: String| TraceError::Schema { path: p.clone(), line, message };
    let mut records: Vec<TraceRecord> = Vec::new();
    let mut last_line = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|source| TraceError::Io { path: p.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        last_line = n;
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| schema(n, e.to_string()))?;
        if rec.v != TRACE_VERSION {
            return Err(schema(n, format!("unsupported trace version {}", rec.v)));
        }
        if let Some(first) = records.first() {
            if rec.run_id != first.run_id {
                return Err(schema(n, format!("run_id {} differs from {}", rec.run_id, first.run_id)));
            }
        }
        if rec.seq != records.len() as u64 {
            return Err(schema(n, format!("expected seq {}, found {}", records.len(), rec.seq)));
        }
        if records.last().is_some_and(|r| matches!(r.event, RunEvent::RunFinished { .. })) {
            return Err(schema(n, "record after run_finished".into()));
        }
        records.push(rec);
    }
    match records.last() {
        None => Err(schema(1, "empty trace".into())),
        Some(r) if !matches!(r.event, RunEvent::RunFinished { .. }) => {
            Err(schema(last_line + 1, "trace ends without run_finished".into()))
        }
        Some(_) => Ok(records),
    }
}

/// Trace text with every `ts` value blanked, for comparing runs.
pub fn normalize_timestamps(trace: &str) -> String {
    trace
        .lines()
        .map(|line| match serde_json::from_str::<TraceRecord>(line) {
            Ok(mut r) => {
                r.ts = String::new();
                r.to_json()
            }
            Err(_) => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use deckhand_core::device::{Device, DeviceError, DeviceInfo, ExecReport, SimDevice, World};
use deckhand_core::domain::{Action, Screenshot};
use deckhand_core::gateway::{ChatBackend, ChatRequest, Completion, GatewayError, ScriptEntry};

pub const HIGH: f64 = -0.0001;
pub const LOW: f64 = -0.5;

pub fn worlds_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../worlds")
}

pub fn files_world() -> Arc<World> {
    Arc::new(World::load(&worlds_dir().join("files.toml")).unwrap())
}

pub fn op(action: &str, logprob: f64) -> ScriptEntry {
    ScriptEntry::reply(format!("Thought: next move\nAction: {action}\nDescription: perform {action}"))
        .matching("[role: operator]")
        .with_uniform_logprob(logprob)
}

pub fn progress(text: &str) -> ScriptEntry {
    ScriptEntry::reply(format!("Progress: {text}")).matching("[role: progressor]")
}

pub fn verdict(role: &str, reply: &str) -> ScriptEntry {
    ScriptEntry::reply(reply).matching(format!("[role: {role}]"))
}

/// Passes requests through and keeps a copy of each.
pub struct Recording<B> {
    pub inner: B,
    pub log: Mutex<Vec<ChatRequest>>,
}

impl<B> Recording<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn tagged(&self, tag: &str) -> Vec<ChatRequest> {
        self.log.lock().unwrap().iter().filter(|r| r.tag.as_deref() == Some(tag)).cloned().collect()
    }
}

impl<B: ChatBackend> ChatBackend for Recording<B> {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        self.log.lock().unwrap().push(request.clone());
        self.inner.complete(request)
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}

/// Counts executed actions.
pub struct Counting {
    pub inner: SimDevice,
    pub executed: Arc<AtomicUsize>,
}

impl Counting {
    pub fn new(inner: SimDevice) -> Self {
        Self { inner, executed: Arc::new(AtomicUsize::new(0)) }
    }

    pub fn count(&self) -> usize {
        self.executed.load(Ordering::SeqCst)
    }
}

impl Device for Counting {
    fn info(&self) -> &DeviceInfo {
        self.inner.info()
    }

    fn capture(&mut self) -> Result<Screenshot, DeviceError> {
        self.inner.capture()
    }

    fn execute(&mut self, action: &Action) -> Result<ExecReport, DeviceError> {
        self.executed.fetch_add(1, Ordering::SeqCst);
        self.inner.execute(action)
    }
}

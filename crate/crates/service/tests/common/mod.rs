#![allow(dead_code)]

use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};

use deckhand_core::agents::Agents;
use deckhand_core::device::{Device, SimDevice, World};
use deckhand_core::exploration::ExplorationConfig;
use deckhand_core::gateway::{ChatBackend, ChatRequest, Completion, GatewayError, ScriptEntry, ScriptedBackend};
use deckhand_core::knowledge::KnowledgeStore;
use deckhand_core::orchestrator::RunConfig;
use deckhand_service::{router, Service, ServiceConfig};
use futures::StreamExt;
use serde_json::Value;

pub const BLANK: &str = r#"{"action_type": "click", "coordinate": [180, 600]}"#;
pub const DONE: &str = r#"{"action_type": "terminate", "status": "success"}"#;

pub fn files_world() -> Arc<World> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../worlds/files.toml");
    Arc::new(World::load(&path).unwrap())
}

pub fn op(action: &str) -> ScriptEntry {
    ScriptEntry::reply(format!("Thought: next\nAction: {action}\nDescription: do {action}"))
        .matching("[role: operator]")
        .with_uniform_logprob(-0.0001)
}

/// `clicks` no-op taps, then a terminate the global reflector accepts.
pub fn script(clicks: usize) -> Vec<ScriptEntry> {
    let mut s = Vec::new();
    for i in 0..clicks {
        s.push(op(BLANK));
        s.push(ScriptEntry::reply(format!("Progress: tapped {} times", i + 1)).matching("[role: progressor]"));
    }
    s.push(op(DONE));
    s.push(ScriptEntry::reply("VERDICT: OK\nNothing left to do.").matching("[role: global_reflector]"));
    s
}

/// Blocks each operator call until a permit is granted.
#[derive(Clone, Default)]
pub struct Permits(Arc<(Mutex<usize>, Condvar)>);

impl Permits {
    pub fn grant(&self, n: usize) {
        *self.0 .0.lock().unwrap() += n;
        self.0 .1.notify_all();
    }

    fn take(&self) {
        let mut n = self.0 .0.lock().unwrap();
        while *n == 0 {
            n = self.0 .1.wait(n).unwrap();
        }
        *n -= 1;
    }
}

pub struct Gated {
    inner: ScriptedBackend,
    permits: Option<Permits>,
}

impl ChatBackend for Gated {
    fn complete(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        if let (Some(p), Some("operator")) = (&self.permits, request.tag.as_deref()) {
            p.take();
        }
        self.inner.complete(request)
    }

    fn model_id(&self) -> &str {
        self.inner.model_id()
    }
}

pub struct Harness {
    pub base: String,
    pub client: reqwest::Client,
    pub service: Arc<Service>,
    pub store: Arc<KnowledgeStore>,
}

pub struct Options {
    pub scripts: Vec<Vec<ScriptEntry>>,
    pub permits: Option<Permits>,
    pub device: bool,
    pub run: RunConfig,
}

impl Default for Options {
    fn default() -> Self {
        let run = RunConfig { enable_trajectory_reflector: false, ..RunConfig::default() };
        Self { scripts: Vec::new(), permits: None, device: true, run }
    }
}

pub async fn start(opts: Options) -> Harness {
    let queue = Arc::new(Mutex::new(VecDeque::from(opts.scripts)));
    let permits = opts.permits;
    let world = files_world();
    let store = Arc::new(KnowledgeStore::in_memory());
    let device: Option<deckhand_service::DeviceFactory> = if opts.device {
        Some(Arc::new(move || Ok(Box::new(SimDevice::new(world.clone())) as Box<dyn Device>)))
    } else {
        None
    };
    let service = Service::new(ServiceConfig {
        run: opts.run,
        exploration: ExplorationConfig::default(),
        agents: Agents::default(),
        gateway: Arc::new(move || {
            let script = queue.lock().unwrap().pop_front().unwrap_or_default();
            Ok(Box::new(Gated { inner: ScriptedBackend::load(script)?, permits: permits.clone() }) as Box<dyn ChatBackend>)
        }),
        device,
        store: store.clone(),
        console_dir: None,
    });
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let app = router(service.clone());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Harness { base, client: reqwest::Client::new(), service, store }
}

impl Harness {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let resp = self.client.post(self.url(path)).json(&body).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn get(&self, path: &str) -> (u16, Value) {
        let resp = self.client.get(self.url(path)).send().await.unwrap();
        let status = resp.status().as_u16();
        (status, resp.json().await.unwrap_or(Value::Null))
    }

    pub async fn create(&self, instruction: &str) -> String {
        let (status, body) = self.post("/api/runs", serde_json::json!({ "instruction": instruction })).await;
        assert_eq!(status, 201, "{body}");
        body["run_id"].as_str().unwrap().to_string()
    }

    pub async fn events(&self, run_id: &str, last_event_id: Option<u64>) -> EventStream {
        let mut req = self.client.get(self.url(&format!("/api/runs/{run_id}/events")));
        if let Some(id) = last_event_id {
            req = req.header("Last-Event-ID", id.to_string());
        }
        let resp = req.send().await.unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        EventStream { body: Box::pin(resp.bytes_stream()), buf: String::new() }
    }

    /// Reads the whole stream of a run.
    pub async fn all_events(&self, run_id: &str) -> Vec<SseEvent> {
        self.events(run_id, None).await.collect_all().await
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SseEvent {
    pub id: Option<String>,
    pub data: String,
}

impl SseEvent {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.data).unwrap()
    }

    pub fn seq(&self) -> u64 {
        self.json()["seq"].as_u64().unwrap()
    }

    pub fn kind(&self) -> String {
        self.json()["type"].as_str().unwrap().to_string()
    }
}

type Body = std::pin::Pin<Box<dyn futures::Stream<Item = reqwest::Result<axum::body::Bytes>> + Send>>;

pub struct EventStream {
    body: Body,
    buf: String,
}

impl EventStream {
    /// The next event, or `None` once the server closes the stream.
    pub async fn next(&mut self) -> Option<SseEvent> {
        loop {
            if let Some(end) = self.buf.find("\n\n") {
                let block: String = self.buf.drain(..end + 2).collect();
                let mut event = SseEvent { id: None, data: String::new() };
                let mut has_data = false;
                for line in block.lines() {
                    if let Some(v) = line.strip_prefix("id:") {
                        event.id = Some(v.trim_start().to_string());
                    } else if let Some(v) = line.strip_prefix("data:") {
                        if has_data {
                            event.data.push('\n');
                        }
                        event.data.push_str(v.strip_prefix(' ').unwrap_or(v));
                        has_data = true;
                    }
                }
                if has_data {
                    return Some(event);
                }
                continue;
            }
            match self.body.next().await {
                Some(Ok(chunk)) => self.buf.push_str(&String::from_utf8_lossy(&chunk)),
                _ => return None,
            }
        }
    }

    pub async fn collect_all(mut self) -> Vec<SseEvent> {
        let mut out = Vec::new();
        while let Some(e) = self.next().await {
            out.push(e);
        }
        out
    }
}

use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use deckhand_core::exploration::{ExplorationConfig, ExplorationReport, Explorer};
use deckhand_core::domain::Instruction;
use deckhand_core::knowledge::{KnowledgeError, KnowledgeItem, KnowledgeSource};
use deckhand_core::orchestrator::{Orchestrator, Recorder, RunConfig, TraceWriter};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::cors::{Any, CorsLayer};
use tower_http::services::ServeDir;

use crate::log::{shot_index, HandleStatus, RunEntry, RunHandle};
use crate::{DeviceLease, Service};

type Shared = State<Arc<Service>>;

pub fn router(service: Arc<Service>) -> Router {
    let console = service.console_dir.clone();
    let api = Router::new()
        .route("/api/health", get(health))
        .route("/api/runs", get(list_runs).post(create_run))
        .route("/api/runs/{id}", get(get_run))
        .route("/api/runs/{id}/events", get(stream_events))
        .route("/api/runs/{id}/abort", post(abort_run))
        .route("/api/runs/{id}/shots/{file}", get(get_shot))
        .route("/api/knowledge", get(list_knowledge).post(add_knowledge))
        .route("/api/explore", get(list_explorations).post(start_exploration))
        .route("/api/explore/{id}", get(get_exploration))
        .with_state(service);
    let app = match console {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(CorsLayer::new().allow_origin(Any).allow_methods(Any).allow_headers(Any))
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

fn body<T>(payload: Result<Json<T>, JsonRejection>) -> Result<T, Response> {
    payload.map(|Json(v)| v).map_err(|e| error(StatusCode::BAD_REQUEST, e.body_text()))
}

/// `base` with `patch`'s fields laid over it, recursively.
fn overlay<T: Serialize + DeserializeOwned>(base: &T, patch: Option<Value>, server_only: &[&str]) -> Result<T, String> {
    let mut value = serde_json::to_value(base).map_err(|e| e.to_string())?;
    if let Some(patch) = patch {
        if let Some(key) = server_only.iter().find(|k| patch.get(**k).is_some()) {
            return Err(format!("{key} is set by the server"));
        }
        merge(&mut value, patch);
    }
    serde_json::from_value(value).map_err(|e| e.to_string())
}

fn merge(into: &mut Value, patch: Value) {
    match (into, patch) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                match a.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        a.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

async fn health(State(svc): Shared) -> Json<Value> {
    let device = match (&svc.device, svc.device_busy()) {
        (None, _) => "none",
        (Some(_), true) => "busy",
        (Some(_), false) => "available",
    };
    Json(json!({ "ok": true, "device": device }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRun {
    instruction: String,
    #[serde(default)]
    app_hint: Option<String>,
    /// Partial [`RunConfig`] laid over the server's defaults.
    #[serde(default)]
    config: Option<Value>,
}

async fn create_run(State(svc): Shared, payload: Result<Json<CreateRun>, JsonRejection>) -> Response {
    let req = match body(payload) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let mut instruction = match Instruction::new(req.instruction) {
        Ok(i) => i,
        Err(e) => return error(StatusCode::BAD_REQUEST, e.to_string()),
    };
    if let Some(hint) = req.app_hint.filter(|h| !h.trim().is_empty()) {
        instruction = instruction.with_app_hint(hint);
    }
    let config: RunConfig = match overlay(&svc.run_defaults, req.config, &["trace_dir", "template_dir"]) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid config: {e}")),
    };
    if let Err(e) = config.validate() {
        return error(StatusCode::BAD_REQUEST, format!("invalid config: {e}"));
    }
    let Some(factory) = svc.device.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no device is attached");
    };
    let Some(lease) = svc.lease_device() else {
        return error(StatusCode::CONFLICT, "the device is busy");
    };
    let gateway = match (svc.gateway)() {
        Ok(g) => g,
        Err(e) => return error(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
    };
    let device = match tokio::task::spawn_blocking(move || factory()).await {
        Ok(Ok(d)) => d,
        Ok(Err(e)) => return error(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
        Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    };

    let run_id = svc.next_id("run");
    let mut recorder = Recorder::new(&run_id);
    if let Some(dir) = &config.trace_dir {
        match TraceWriter::create(dir, &run_id) {
            Ok(w) => recorder.add_sink(Box::new(w)),
            Err(e) => return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        }
    }
    let entry = RunEntry::new(RunHandle {
        run_id: run_id.clone(),
        created_at: Utc::now(),
        status: HandleStatus::Running,
        instruction: instruction.text().to_string(),
        answer: None,
        steps: 0,
    });
    recorder.add_sink(entry.sink());
    let flag = svc.aborts.register(&run_id);
    svc.runs.lock().unwrap().push(entry.clone());

    let handle = entry.handle();
    let guard = RunGuard { svc: svc.clone(), entry, lease: Some(lease) };
    tokio::task::spawn_blocking(move || {
        let mut device = device;
        let svc = guard.svc.clone();
        let orch = Orchestrator::new(&config, &svc.agents, gateway.as_ref()).with_store(&svc.store);
        let result = orch.run(&instruction, &mut device, &mut recorder, &flag);
        guard.entry.finish(&result);
        drop(guard);
    });
    let location = format!("/api/runs/{run_id}");
    (StatusCode::CREATED, [(header::LOCATION, location)], Json(handle)).into_response()
}

/// Frees the device, then publishes the end of the run, even on panic.
struct RunGuard {
    svc: Arc<Service>,
    entry: Arc<RunEntry>,
    lease: Option<DeviceLease>,
}

impl Drop for RunGuard {
    fn drop(&mut self) {
        self.lease.take();
        self.svc.aborts.finish(&self.entry.run_id());
        self.entry.close();
    }
}

async fn list_runs(State(svc): Shared) -> Json<Vec<RunHandle>> {
    Json(svc.runs())
}

async fn get_run(State(svc): Shared, Path(id): Path<String>) -> Response {
    match svc.run(&id) {
        Some(r) => Json(r.handle()).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown run {id}")),
    }
}

async fn stream_events(State(svc): Shared, Path(id): Path<String>, headers: HeaderMap) -> Response {
    let Some(entry) = svc.run(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown run {id}"));
    };
    let from = match headers.get("last-event-id").map(|v| v.to_str().map(str::trim)) {
        None => 0,
        Some(Ok(v)) => match v.parse::<usize>() {
            Ok(seq) => seq + 1,
            Err(_) => return error(StatusCode::BAD_REQUEST, format!("Last-Event-ID {v:?} is not a sequence number")),
        },
        Some(Err(_)) => return error(StatusCode::BAD_REQUEST, "Last-Event-ID is not text"),
    };
    Sse::new(entry.stream(from)).keep_alive(KeepAlive::default()).into_response()
}

async fn abort_run(State(svc): Shared, Path(id): Path<String>) -> Response {
    let Some(entry) = svc.run(&id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown run {id}"));
    };
    match svc.aborts.abort(&id) {
        Ok(()) => (StatusCode::ACCEPTED, Json(json!({ "run_id": id, "abort": "requested" }))).into_response(),
        Err(_) if !entry.is_running() => error(StatusCode::CONFLICT, format!("run {id} already finished")),
        Err(e) => error(StatusCode::NOT_FOUND, e.to_string()),
    }
}

async fn get_shot(State(svc): Shared, Path((id, file)): Path<(String, String)>) -> Response {
    let png = svc.run(&id).zip(shot_index(&file)).and_then(|(entry, n)| entry.shot(n));
    match png {
        Some(bytes) => ([(header::CONTENT_TYPE, "image/png")], bytes).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("no screenshot {file} for run {id}")),
    }
}

#[derive(Deserialize)]
struct KnowledgeQuery {
    app: Option<String>,
}

async fn list_knowledge(State(svc): Shared, Query(q): Query<KnowledgeQuery>) -> Json<Vec<KnowledgeItem>> {
    Json(match q.app {
        Some(app) => svc.store.items_for_app(&app),
        None => svc.store.items(),
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NewKnowledge {
    app: String,
    text: String,
    #[serde(default)]
    tags: Vec<String>,
}

async fn add_knowledge(State(svc): Shared, payload: Result<Json<NewKnowledge>, JsonRejection>) -> Response {
    let req = match body(payload) {
        Ok(r) => r,
        Err(resp) => return resp,
    };
    let source = KnowledgeSource { episode: "manual".into(), steps: [0, 0] };
    let item = KnowledgeItem::new(req.app.trim(), req.text.trim(), req.tags, source, Utc::now());
    let store = svc.store.clone();
    match tokio::task::spawn_blocking(move || store.add(item)).await {
        Ok(Ok(id)) => (StatusCode::CREATED, Json(svc.store.get(&id))).into_response(),
        Ok(Err(e @ KnowledgeError::Invalid(_))) => error(StatusCode::BAD_REQUEST, e.to_string()),
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplorationState {
    Running,
    Finished,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplorationHandle {
    pub id: String,
    pub created_at: DateTime<Utc>,
    pub state: ExplorationState,
    pub apps: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<ExplorationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

async fn start_exploration(State(svc): Shared, payload: Result<Json<Value>, JsonRejection>) -> Response {
    let patch = match body(payload) {
        Ok(v) => v,
        Err(resp) => return resp,
    };
    let config: ExplorationConfig = match overlay(&svc.exploration_defaults, Some(patch), &["trace_dir"]) {
        Ok(c) => c,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid exploration config: {e}")),
    };
    if let Err(e) = config.validate() {
        return error(StatusCode::BAD_REQUEST, format!("invalid exploration config: {e}"));
    }
    let Some(factory) = svc.device.clone() else {
        return error(StatusCode::SERVICE_UNAVAILABLE, "no device is attached");
    };
    let Some(lease) = svc.lease_device() else {
        return error(StatusCode::CONFLICT, "the device is busy");
    };
    let gateway = match (svc.gateway)() {
        Ok(g) => g,
        Err(e) => return error(StatusCode::SERVICE_UNAVAILABLE, e.to_string()),
    };
    let handle = ExplorationHandle {
        id: svc.next_id("explore"),
        created_at: Utc::now(),
        state: ExplorationState::Running,
        apps: config.apps.clone(),
        report: None,
        error: None,
    };
    let slot = Arc::new(Mutex::new(handle.clone()));
    svc.explorations.lock().unwrap().push(slot.clone());
    let svc2 = svc.clone();
    tokio::task::spawn_blocking(move || {
        let _lease = lease;
        let outcome = factory().map_err(|e| e.to_string()).and_then(|mut device| {
            Explorer::new(&config, &svc2.agents, gateway.as_ref(), &svc2.store)
                .run(&mut device)
                .map_err(|e| e.to_string())
        });
        let mut h = slot.lock().unwrap();
        match outcome {
            Ok(report) => {
                h.state = ExplorationState::Finished;
                h.report = Some(report);
            }
            Err(e) => {
                h.state = ExplorationState::Failed;
                h.error = Some(e);
            }
        }
    });
    let location = format!("/api/explore/{}", handle.id);
    (StatusCode::ACCEPTED, [(header::LOCATION, location)], Json(handle)).into_response()
}

async fn list_explorations(State(svc): Shared) -> Json<Vec<ExplorationHandle>> {
    Json(svc.explorations.lock().unwrap().iter().rev().map(|h| h.lock().unwrap().clone()).collect())
}

async fn get_exploration(State(svc): Shared, Path(id): Path<String>) -> Response {
    let found = svc.explorations.lock().unwrap().iter().map(|h| h.lock().unwrap().clone()).find(|h| h.id == id);
    match found {
        Some(h) => Json(h).into_response(),
        None => error(StatusCode::NOT_FOUND, format!("unknown exploration {id}")),
    }
}

//! HTTP and server-sent-events front end for deckhand runs.
//!
//! One device is shared by all runs and explorations; whichever holds it
//! makes the others wait with `409`. Runs execute on blocking threads and
//! stream their trace records to subscribers as they are written.

mod log;
mod routes;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use deckhand_core::agents::Agents;
use deckhand_core::device::{Device, DeviceError};
use deckhand_core::exploration::ExplorationConfig;
use deckhand_core::gateway::{ChatBackend, GatewayError};
use deckhand_core::knowledge::KnowledgeStore;
use deckhand_core::orchestrator::{AbortRegistry, RunConfig};

pub use log::{shot_index, HandleStatus, RunEntry, RunHandle};
pub use routes::{router, ExplorationHandle, ExplorationState};

pub type GatewayFactory = Arc<dyn Fn() -> Result<Box<dyn ChatBackend>, GatewayError> + Send + Sync>;
pub type DeviceFactory = Arc<dyn Fn() -> Result<Box<dyn Device>, DeviceError> + Send + Sync>;

pub struct ServiceConfig {
    pub run: RunConfig,
    pub exploration: ExplorationConfig,
    pub agents: Agents,
    pub gateway: GatewayFactory,
    /// `None` answers every run with `503`.
    pub device: Option<DeviceFactory>,
    pub store: Arc<KnowledgeStore>,
    /// Static files served at `/`.
    pub console_dir: Option<PathBuf>,
}

pub struct Service {
    run_defaults: RunConfig,
    exploration_defaults: ExplorationConfig,
    agents: Arc<Agents>,
    gateway: GatewayFactory,
    device: Option<DeviceFactory>,
    device_busy: AtomicBool,
    store: Arc<KnowledgeStore>,
    console_dir: Option<PathBuf>,
    runs: Mutex<Vec<Arc<RunEntry>>>,
    explorations: Mutex<Vec<Arc<Mutex<ExplorationHandle>>>>,
    aborts: AbortRegistry,
    counter: AtomicUsize,
}

impl Service {
    pub fn new(config: ServiceConfig) -> Arc<Self> {
        Arc::new(Self {
            run_defaults: config.run,
            exploration_defaults: config.exploration,
            agents: Arc::new(config.agents),
            gateway: config.gateway,
            device: config.device,
            device_busy: AtomicBool::new(false),
            store: config.store,
            console_dir: config.console_dir,
            runs: Mutex::default(),
            explorations: Mutex::default(),
            aborts: AbortRegistry::default(),
            counter: AtomicUsize::new(0),
        })
    }

    fn next_id(&self, prefix: &str) -> String {
        let n = self.counter.fetch_add(1, Ordering::Relaxed) + 1;
        let tag = uuid::Uuid::new_v4().simple().to_string();
        format!("{prefix}-{n}-{}", &tag[..8])
    }

    fn lease_device(self: &Arc<Self>) -> Option<DeviceLease> {
        self.device_busy
            .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
            .ok()
            .map(|_| DeviceLease(self.clone()))
    }

    pub fn run(&self, id: &str) -> Option<Arc<RunEntry>> {
        self.runs.lock().unwrap().iter().find(|r| r.run_id() == id).cloned()
    }

    /// Newest first.
    pub fn runs(&self) -> Vec<RunHandle> {
        self.runs.lock().unwrap().iter().rev().map(|r| r.handle()).collect()
    }

    pub fn device_busy(&self) -> bool {
        self.device_busy.load(Ordering::Acquire)
    }
}

/// Exclusive use of the device until dropped.
struct DeviceLease(Arc<Service>);

impl Drop for DeviceLease {
    fn drop(&mut self) {
        self.0.device_busy.store(false, Ordering::Release);
    }
}

/// Binds `addr` and serves until the process is interrupted.
pub async fn serve(service: Arc<Service>, addr: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(service))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

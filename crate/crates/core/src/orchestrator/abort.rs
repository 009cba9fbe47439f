use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown run `{0}`")]
pub struct UnknownRun(pub String);

/// Checked by a run between sub-steps.
#[derive(Debug, Clone, Default)]
pub struct AbortFlag(Arc<AtomicBool>);

impl AbortFlag {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&self) {
        self.0.store(true, Ordering::SeqCst);
    }

    pub fn is_set(&self) -> bool {
        self.0.load(Ordering::SeqCst)
    }
}

/// Abort flags of the runs currently in progress.
#[derive(Debug, Clone, Default)]
pub struct AbortRegistry {
    runs: Arc<Mutex<HashMap<String, AbortFlag>>>,
}

impl AbortRegistry {
    pub fn register(&self, run_id: &str) -> AbortFlag {
        let flag = AbortFlag::new();
        self.runs.lock().unwrap().insert(run_id.to_string(), flag.clone());
        flag
    }

    /// Idempotent while the run is in progress.
    pub fn abort(&self, run_id: &str) -> Result<(), UnknownRun> {
        match self.runs.lock().unwrap().get(run_id) {
            Some(flag) => {
                flag.set();
                Ok(())
            }
            None => Err(UnknownRun(run_id.to_string())),
        }
    }

    pub fn finish(&self, run_id: &str) {
        self.runs.lock().unwrap().remove(run_id);
    }

    pub fn is_active(&self, run_id: &str) -> bool {
        self.runs.lock().unwrap().contains_key(run_id)
    }
}

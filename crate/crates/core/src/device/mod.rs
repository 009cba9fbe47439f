//! Devices that capture screens and execute actions.

pub mod adb;
pub mod sim;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Action, Screenshot};

pub use adb::{AdbDevice, CommandOutput, CommandRunner, SystemRunner};
pub use sim::{SimDevice, SimTask, World, WorldError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Adb,
    Sim,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub width: u32,
    pub height: u32,
    pub device_id: String,
    pub backend: Backend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "reason", rename_all = "snake_case")]
pub enum ExecReport {
    Applied,
    NoEffect,
    Rejected(String),
}

impl fmt::Display for ExecReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecReport::Applied => f.write_str("applied"),
            ExecReport::NoEffect => f.write_str("no_effect"),
            ExecReport::Rejected(why) => write!(f, "rejected: {why}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("device disconnected: {0}")]
    Disconnected(String),
    #[error("could not decode screen capture: {0}")]
    CaptureDecode(String),
    #[error("no app named `{0}`")]
    UnknownApp(String),
    #[error("device command failed: {0}")]
    Command(String),
}

/// One device session. Calls on a session are sequential by `&mut self`.
pub trait Device: Send {
    fn info(&self) -> &DeviceInfo;

    fn capture(&mut self) -> Result<Screenshot, DeviceError>;

    /// Runs `action`. Invalid actions are reported as [`ExecReport::Rejected`]
    /// without touching the device.
    fn execute(&mut self, action: &Action) -> Result<ExecReport, DeviceError>;
}

impl<D: Device + ?Sized> Device for Box<D> {
    fn info(&self) -> &DeviceInfo {
        (**self).info()
    }

    fn capture(&mut self) -> Result<Screenshot, DeviceError> {
        (**self).capture()
    }

    fn execute(&mut self, action: &Action) -> Result<ExecReport, DeviceError> {
        (**self).execute(action)
    }
}

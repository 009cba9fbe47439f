//! Settings from an optional TOML file overlaid with environment variables.
//!
//! Precedence, lowest first: built-in defaults, the file, the environment.
//! Command-line flags are applied on top by the caller.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exploration::ExplorationConfig;
use crate::gateway::{GatewayError, OpenAiBackend, OpenAiConfig, RetryPolicy};
use crate::orchestrator::RunConfig;

pub const DEFAULT_BIND: &str = "127.0.0.1:7860";

#[derive(Debug, Error)]
pub enum SettingsError {
    #[error("{path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("environment variable {key}={value:?}: {message}")]
    Env { key: &'static str, value: String, message: String },
    #[error("invalid settings: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub base_url: Option<String>,
    pub api_key: Option<String>,
    pub name: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { base_url: None, api_key: None, name: None, timeout_secs: 60, max_retries: 3 }
    }
}

impl ModelSettings {
    pub fn backend(&self) -> Result<OpenAiBackend, GatewayError> {
        let base_url = self
            .base_url
            .clone()
            .ok_or_else(|| GatewayError::NotConfigured("MODEL_BASE_URL is not set".into()))?;
        let model = self.name.clone().ok_or_else(|| GatewayError::NotConfigured("MODEL_NAME is not set".into()))?;
        OpenAiBackend::new(OpenAiConfig {
            base_url,
            api_key: self.api_key.clone(),
            model,
            retry: RetryPolicy {
                max_retries: self.max_retries,
                attempt_timeout: Duration::from_secs(self.timeout_secs),
                ..RetryPolicy::default()
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub model: ModelSettings,
    pub run: RunConfig,
    pub exploration: ExplorationConfig,
    pub knowledge_path: Option<PathBuf>,
    pub service_bind: String,
    /// Static files served at `/` by the service.
    pub console_dir: Option<PathBuf>,
    /// App name to Android package, used by `open` on ADB devices.
    pub packages: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            model: ModelSettings::default(),
            run: RunConfig::default(),
            exploration: ExplorationConfig::default(),
            knowledge_path: None,
            service_bind: DEFAULT_BIND.into(),
            console_dir: None,
            packages: BTreeMap::new(),
        }
    }
}

impl Settings {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, SettingsError> {
        toml::from_str(text).map_err(|e| SettingsError::Parse { path: origin.into(), message: e.to_string() })
    }

    /// Loads `file` if given, then applies `env`.
    pub fn load(file: Option<&Path>, env: impl Fn(&str) -> Option<String>) -> Result<Self, SettingsError> {
        let mut s = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|source| SettingsError::Read { path: path.display().to_string(), source })?;
                Self::from_toml(&text, &path.display().to_string())?
            }
            None => Self::default(),
        };
        s.apply_env(env)?;
        s.validate()?;
        Ok(s)
    }

    /// [`Settings::load`] with the process environment.
    pub fn load_from_process(file: Option<&Path>) -> Result<Self, SettingsError> {
        Self::load(file, |k| std::env::var(k).ok().filter(|v| !v.is_empty()))
    }

    pub fn apply_env(&mut self, env: impl Fn(&str) -> Option<String>) -> Result<(), SettingsError> {
        fn parsed<T: FromStr>(key: &'static str, value: String) -> Result<T, SettingsError>
        where
            T::Err: std::fmt::Display,
        {
            value.trim().parse().map_err(|e: T::Err| SettingsError::Env { key, value, message: e.to_string() })
        }
        macro_rules! set {
            ($key:literal, $slot:expr, string) => {
                if let Some(v) = env($key) {
                    $slot = Some(v.into());
                }
            };
            ($key:literal, $slot:expr) => {
                if let Some(v) = env($key) {
                    $slot = parsed($key, v)?;
                }
            };
        }
        set!("MODEL_BASE_URL", self.model.base_url, string);
        set!("MODEL_API_KEY", self.model.api_key, string);
        set!("MODEL_NAME", self.model.name, string);
        set!("MODEL_TIMEOUT_SECS", self.model.timeout_secs);
        set!("MODEL_MAX_RETRIES", self.model.max_retries);
        let gate = &mut self.run.gate;
        set!("GATE_THETA", gate.theta);
        set!("GATE_TRAJECTORY_WINDOW", gate.trajectory_window);
        set!("GATE_REPEAT_ACTION_COUNT", gate.repeat_action_count);
        set!("GATE_REPEAT_SCREEN_COUNT", gate.repeat_screen_count);
        set!("GATE_SCREEN_SAME_THRESHOLD", gate.screen_same_threshold);
        set!("GATE_ACCUMULATED_ERROR_COUNT", gate.accumulated_error_count);
        set!("TEMPLATE_DIR", self.run.template_dir, string);
        set!("TRACE_DIR", self.run.trace_dir, string);
        set!("KNOWLEDGE_PATH", self.knowledge_path, string);
        if let Some(v) = env("SERVICE_BIND") {
            self.service_bind = v;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), SettingsError> {
        self.run.validate().map_err(|e| SettingsError::Invalid(e.to_string()))?;
        if self.model.timeout_secs == 0 {
            return Err(SettingsError::Invalid("model timeout_secs must be at least 1".into()));
        }
        if self.service_bind.parse::<std::net::SocketAddr>().is_err() {
            return Err(SettingsError::Invalid(format!("service_bind {:?} is not host:port", self.service_bind)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    fn env(pairs: &[(&str, &str)]) -> impl Fn(&str) -> Option<String> {
        let map: HashMap<String, String> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        move |k| map.get(k).cloned()
    }

    #[test]
    fn defaults() {
        let s = Settings::load(None, env(&[])).unwrap();
        assert_eq!(s.service_bind, "127.0.0.1:7860");
        assert_eq!(s.run.max_steps, 30);
        assert_eq!(s.run.gate.theta, -0.001);
    }

    #[test]
    fn env_overrides_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("deckhand.toml");
        std::fs::write(
            &path,
            "knowledge_path = \"k.jsonl\"\n[model]\nname = \"file-model\"\n[run]\nmax_steps = 12\n[run.gate]\ntheta = -0.01\n",
        )
        .unwrap();
        let s = Settings::load(Some(&path), env(&[("MODEL_NAME", "env-model"), ("GATE_TRAJECTORY_WINDOW", "6")])).unwrap();
        assert_eq!(s.model.name.as_deref(), Some("env-model"));
        assert_eq!(s.run.max_steps, 12);
        assert_eq!(s.run.gate.theta, -0.01);
        assert_eq!(s.run.gate.trajectory_window, 6);
        assert_eq!(s.knowledge_path, Some(PathBuf::from("k.jsonl")));
    }

    #[test]
    fn theta_accepts_negative_infinity() {
        let s = Settings::load(None, env(&[("GATE_THETA", "-inf")])).unwrap();
        assert_eq!(s.run.gate.theta, f64::NEG_INFINITY);
    }

    #[test]
    fn bad_values_are_named() {
        let err = Settings::load(None, env(&[("MODEL_MAX_RETRIES", "many")])).unwrap_err();
        assert!(err.to_string().contains("MODEL_MAX_RETRIES"));
        assert!(Settings::load(None, env(&[("GATE_THETA", "0.5")])).is_err());
        assert!(Settings::from_toml("[run]\nbogus = 1\n", "x").is_err());
    }

    #[test]
    fn backend_needs_url_and_model() {
        let s = Settings::default();
        assert!(matches!(s.model.backend(), Err(GatewayError::NotConfigured(_))));
    }
}

//! The run configuration file shared by every CLI command.
//!
//! ```toml
//! run_name = "desk"
//! output_dir = "runs"
//!
//! [network]   # IrcamConfig
//! [sim]       # SimConfig
//! [train]     # TrainConfig
//! [eval]      # EvalConfig
//! ```
//!
//! Every key is optional and defaults to the values of the section's type;
//! unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalConfig;
use crate::net::IrcamConfig;
use crate::sim::SimConfig;
use crate::train::{TrainConfig, TrainSetup};

/// Overrides the configured output root when set.
pub const RUN_DIR_ENV: &str = "IRCAM_RUN_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {msg}")]
    Read { path: String, msg: String },
    #[error("{0}")]
    Parse(String),
    #[error("bad override `{0}` (expected section.key=value)")]
    Override(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run_name: String,
    pub output_dir: PathBuf,
    pub network: IrcamConfig,
    pub sim: SimConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_name: "ircam".into(),
            output_dir: PathBuf::from("runs"),
            network: IrcamConfig::default(),
            sim: SimConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Read { path: path.display().to_string(), msg: e.to_string() })?;
        Self::from_toml_with(&text, overrides)
    }

    /// Parses `text`, applies `section.key=value` overrides, then validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let text = toml::to_string(&doc).map_err(|e| ConfigError::Parse(e.to_string()))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run_name.is_empty() || self.run_name.contains(['/', '\\']) {
            return Err(ConfigError::Invalid(format!("run_name `{}` must be a plain non-empty name", self.run_name)));
        }
        self.train_setup().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.eval.episodes == 0 || self.eval.lanes == 0 {
            return Err(ConfigError::Invalid("eval.episodes and eval.lanes must be positive".into()));
        }
        Ok(())
    }

    pub fn train_setup(&self) -> TrainSetup {
        TrainSetup { network: self.network.clone(), sim: self.sim.clone(), train: self.train.clone() }
    }

    /// Output root, honoring [`RUN_DIR_ENV`].
    pub fn output_root(&self) -> PathBuf {
        std::env::var_os(RUN_DIR_ENV).map_or_else(|| self.output_dir.clone(), PathBuf::from)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.run_name)
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.into()))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ConfigError::Override(spec.into()));
    }
    let raw = raw.trim();
    // bare words that are not TOML literals are taken as strings
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = keys.split_last().expect("split gives at least one key");
    let mut table = doc;
    for k in parents {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        table = entry.as_table_mut().ok_or_else(|| ConfigError::Override(spec.into()))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

//! Shared JSON run configuration for the CLI and the service.
//!
//! The ten mask tunables sit at the top level; flatten, restore and
//! classifier settings are nested objects.

use std::path::{Path, PathBuf};

use afm_core::classify::{ClassifyError, Thresholds};
use afm_core::flatten::{FlattenConfig, FlattenError};
use afm_core::maskgen::{MaskError, MaskOptions, PipelineParams, SeedStats};
use afm_core::restore::{RestoreConfig, RestoreError};
use afm_core::Connectivity;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "AFM_RESTORE_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("`{field}`: {detail}")]
    Field { field: String, detail: String },
}

impl ConfigError {
    pub fn field(&self) -> Option<&str> {
        match self {
            ConfigError::Field { field, .. } => Some(field),
            ConfigError::Io { .. } => None,
        }
    }

    fn at(field: impl Into<String>, detail: impl Into<String>) -> Self {
        ConfigError::Field {
            field: field.into(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub params: PipelineParams,
    pub connectivity: Connectivity,
    pub seed_stats: SeedStats,
    pub flatten: FlattenConfig,
    pub restore: RestoreConfig,
    /// Run the classifier gate; without it every image is restored.
    pub classify: bool,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        let options = MaskOptions::default();
        RunConfig {
            params: PipelineParams::default(),
            connectivity: options.connectivity,
            seed_stats: options.seed_stats,
            flatten: FlattenConfig::default(),
            restore: RestoreConfig::default(),
            classify: true,
            thresholds: Thresholds::default(),
        }
    }
}

const NESTED_KEYS: [&str; 6] = ["connectivity", "seed_stats", "flatten", "restore", "classify", "thresholds"];

impl RunConfig {
    /// Parses a config object; absent keys keep their defaults and unknown
    /// keys are rejected.
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let value: Value = serde_json::from_str(text).map_err(|e| ConfigError::at("$", e.to_string()))?;
        let Value::Object(mut obj) = value else {
            return Err(ConfigError::at("$", "config must be a JSON object"));
        };
        let nested = take_keys(&mut obj, &NESTED_KEYS);
        let defaults = RunConfig::default();
        let params: PipelineParams = params_from_object(obj)?;
        let mut cfg = RunConfig { params, ..defaults };
        for (key, value) in nested {
            match key.as_str() {
                "connectivity" => cfg.connectivity = typed(value, "connectivity")?,
                "seed_stats" => cfg.seed_stats = typed(value, "seed_stats")?,
                "flatten" => cfg.flatten = typed(value, "flatten")?,
                "restore" => cfg.restore = typed(value, "restore")?,
                "classify" => cfg.classify = typed(value, "classify")?,
                "thresholds" => cfg.thresholds = typed(value, "thresholds")?,
                _ => unreachable!("key filtered by take_keys"),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::from_json(&text)
    }

    /// Loads `explicit`, else the file named by [`CONFIG_ENV`], else the
    /// defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self, ConfigError> {
        if let Some(path) = explicit {
            return RunConfig::load(path);
        }
        match std::env::var_os(CONFIG_ENV) {
            Some(p) if !p.is_empty() => RunConfig::load(Path::new(&p)),
            _ => Ok(RunConfig::default()),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.params.validate().map_err(mask_field_error)?;
        self.flatten
            .validate()
            .map_err(|e| flatten_field_error(&e, "flatten."))?;
        self.restore
            .validate()
            .map_err(|e| restore_field_error(&e, "restore."))?;
        self.thresholds.validate().map_err(|e| match e {
            ClassifyError::InvalidThreshold { field, .. } => ConfigError::at(format!("thresholds.{field}"), e.to_string()),
            other => ConfigError::at("thresholds", other.to_string()),
        })?;
        Ok(())
    }

    pub fn mask_options(&self) -> MaskOptions {
        MaskOptions {
            connectivity: self.connectivity,
            seed_stats: self.seed_stats,
        }
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

pub(crate) fn mask_field_error(e: MaskError) -> ConfigError {
    match &e {
        MaskError::InvalidParam { field, .. } => ConfigError::at(*field, e.to_string()),
        _ => ConfigError::at("$", e.to_string()),
    }
}

pub(crate) fn flatten_field_error(e: &FlattenError, prefix: &str) -> ConfigError {
    match e {
        FlattenError::InvalidOrder(_) => ConfigError::at(format!("{prefix}order"), e.to_string()),
        _ => ConfigError::at(prefix.trim_end_matches('.'), e.to_string()),
    }
}

pub(crate) fn restore_field_error(e: &RestoreError, prefix: &str) -> ConfigError {
    match e {
        RestoreError::InvalidConfig { field, .. } => ConfigError::at(format!("{prefix}{field}"), e.to_string()),
        _ => ConfigError::at(prefix.trim_end_matches('.'), e.to_string()),
    }
}

/// Removes `keys` from `obj` and returns them in `keys` order.
pub(crate) fn take_keys(obj: &mut Map<String, Value>, keys: &[&str]) -> Vec<(String, Value)> {
    keys.iter()
        .filter_map(|k| obj.remove(*k).map(|v| (k.to_string(), v)))
        .collect()
}

/// Deserializes `value`, reporting the failing path under `prefix`.
pub(crate) fn typed<T: DeserializeOwned>(value: Value, prefix: &str) -> Result<T, ConfigError> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let field = if path == "." || path.is_empty() {
            prefix.to_string()
        } else if prefix.is_empty() {
            path
        } else {
            format!("{prefix}.{path}")
        };
        ConfigError::at(field, e.into_inner().to_string())
    })
}

/// Deserializes a struct whose default serializes to an object, rejecting
/// keys the struct does not have.
pub(crate) fn strict_object<T: DeserializeOwned + Serialize + Default>(
    obj: Map<String, Value>,
    prefix: &str,
) -> Result<T, ConfigError> {
    let Value::Object(known) = serde_json::to_value(T::default()).expect("defaults serialize") else {
        unreachable!("struct serializes to an object");
    };
    if let Some(key) = obj.keys().find(|k| !known.contains_key(*k)) {
        let field = if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        return Err(ConfigError::at(field, "unknown field"));
    }
    typed(Value::Object(obj), prefix)
}

pub(crate) fn params_from_object(obj: Map<String, Value>) -> Result<PipelineParams, ConfigError> {
    strict_object(obj, "")
}

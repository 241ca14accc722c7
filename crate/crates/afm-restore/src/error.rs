//! Typed error names shared by batch reports and HTTP payloads.

use serde::{Deserialize, Serialize};

/// Pipeline stage an error or job result belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Load,
    Classify,
    Mask,
    Exclusions,
    Flatten,
    Restore,
    Metrics,
    Export,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

/// A library failure tagged with its stage, the error variant name and, for
/// parameter errors, the offending field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[error("{stage}: {name}: {detail}")]
pub struct StageError {
    pub stage: Stage,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
    pub detail: String,
}

impl StageError {
    pub fn new<E: std::fmt::Debug + std::fmt::Display>(stage: Stage, err: &E) -> Self {
        StageError {
            stage,
            name: error_name(err),
            field: None,
            detail: err.to_string(),
        }
    }

    pub fn with_field(mut self, field: impl Into<String>) -> Self {
        self.field = Some(field.into());
        self
    }

    pub fn invalid(stage: Stage, field: impl Into<String>, detail: impl Into<String>) -> Self {
        StageError {
            stage,
            name: "InvalidParam".into(),
            field: Some(field.into()),
            detail: detail.into(),
        }
    }
}

/// Variant name of an error enum, read from its `Debug` form. Transparent
/// wrappers such as `Grid(TooSmall { .. })` report the inner variant.
pub fn error_name<E: std::fmt::Debug>(err: &E) -> String {
    let text = format!("{err:?}");
    let mut rest = text.as_str();
    loop {
        let end = rest
            .find(|c: char| !(c.is_alphanumeric() || c == '_'))
            .unwrap_or(rest.len());
        let name = &rest[..end];
        let tail = &rest[end..];
        match tail.strip_prefix('(') {
            Some(inner) if inner.starts_with(|c: char| c.is_ascii_uppercase()) => rest = inner,
            _ => return if name.is_empty() { "Error".into() } else { name.into() },
        }
    }
}

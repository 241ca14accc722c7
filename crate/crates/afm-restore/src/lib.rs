//! Batch command line and HTTP service around `afm-core`.

pub mod batch;
pub mod config;
pub mod error;
pub mod rle;
pub mod service;
pub mod session;
pub mod stages;

pub use config::{RunConfig, CONFIG_ENV};
pub use error::{Stage, StageError};

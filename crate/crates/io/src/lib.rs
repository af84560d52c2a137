//! File formats, run configuration, artifacts and the run pipeline.

pub mod artifact;
pub mod config;
pub mod error;
pub mod ingest;
pub mod pipeline;

pub use error::{IoError, Result};

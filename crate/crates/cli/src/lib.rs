//! Pipeline stages behind the `noxwatch` binary: ingest, profile, screen, map,
//! simulate and report.

pub mod commands;
pub mod config;
pub mod error;
pub mod store;

pub use config::PipelineConfig;
pub use error::CliError;

//! Pipeline driver for the coordination delay analysis: configuration,
//! stage orchestration and report tables.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod report;
pub mod tables;

pub use config::PipelineConfig;
pub use error::CliError;
pub use pipeline::{run, RunReport, Stage};
pub use report::{summarize_delays, DelaySummary};

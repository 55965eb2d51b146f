//! Batch front end for `vem-core`: JSON run configs, the staged pipeline,
//! structured logs and SVG/CSV figure output.

pub mod commands;
pub mod config;
pub mod error;
pub mod logger;
pub mod pipeline;
pub mod plots;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
pub use logger::Logger;
pub use pipeline::{run_pipeline, PipelineOutput, ReportFile};

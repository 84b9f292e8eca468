//! Stage orchestration for the `synthqa` command.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::{stage_seed, BackendMode, RunConfig};
pub use error::PipelineError;
pub use manifest::Manifest;
pub use pipeline::{run_all, run_stage, Stage};

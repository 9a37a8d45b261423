//! Orchestration for the bdgxrl pipeline: configuration, run manifests, and
//! the resumable offline/online phases behind the `bdgxrl` binary.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::{AblationFlags, ExperimentConfig};
pub use error::{CliError, CliResult};
pub use pipeline::Run;

//! File formats, experiment configuration and the `dect` pipeline commands.

pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod pipeline;
pub mod preview;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
pub use pipeline::{Run, Stage};

//! Command-line orchestration of the soft-sensor pipeline.
//!
//! Each command runs one stage against a run directory; `run` executes every
//! stage in order. Stages verify the digests of their upstream artifacts and
//! record their own in `manifest.toml`.

pub mod app;
pub mod config;
pub mod manifest;
pub mod report;
pub mod stages;

pub use app::{exit_code, Cli, Command, EXIT_DEPENDENCY, EXIT_FAILURE, EXIT_OK, EXIT_VALIDATION};
pub use config::{PipelineConfig, Scale};
pub use manifest::{DependencyError, RunManifest};
pub use stages::{Pipeline, Stage, StageOutcome};

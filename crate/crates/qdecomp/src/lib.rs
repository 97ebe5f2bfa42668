//! Experiment runner, file formats and command line for `qdecomp-core`.

pub mod ascii;
pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod formats;
pub mod runner;

pub use ascii::render_ascii;
pub use checkpoint::{export_checkpoint, import_checkpoint, Checkpoint};
pub use config::{Emit, ExperimentConfig, ExperimentKind, MapRule};
pub use error::{CheckpointError, Result, RunError};
pub use runner::{execute, run, Headline, RunManifest};

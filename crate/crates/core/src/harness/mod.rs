//! Experiment plumbing: configuration, the learning loop and demos.

pub mod config;
pub mod demos;
pub mod run;

pub use config::{validate_config, Diagnostic, ExperimentConfig};
pub use demos::{run_demo, Artifact, DEMOS};
pub use run::{run_section5, write_run, BatchRecord, RunLog, SAFETY_TOLERANCE};

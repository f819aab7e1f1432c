//! Experiment harness for the `lplr-core` stack: configs, replicated runs,
//! analytics, and the files they leave behind.

pub mod analysis;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod reference;
pub mod report;
pub mod scenario;
pub mod selftest;
pub mod verify;

pub use config::{ExperimentConfig, Overrides};
pub use error::SimError;
pub use experiments::{run_experiment, Outcome, Summary};

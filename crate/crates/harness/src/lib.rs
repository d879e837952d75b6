//! Experiment orchestration for the navigation adaptation study: configs,
//! method baselines, runs, sweeps, reports and the feedback HTTP service.

pub mod config;
pub mod error;
pub mod methods;
pub mod report;
pub mod run;
pub mod serve;
pub mod sweep;

pub use config::{ExperimentConfig, Method, OracleKind, Sampling};
pub use error::HarnessError;

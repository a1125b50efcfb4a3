//! Experiment orchestration.

pub mod config;
pub mod pipeline;
pub mod plot;
pub mod report;
pub mod suite;
pub mod verify;

pub use config::ExperimentConfig;

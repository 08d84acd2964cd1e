//! Configuration-driven experiment runner: synthetic data generation,
//! seeded train/evaluate protocols, ablation and segmentation studies, and
//! report plotting.

pub mod config;
mod error;
pub mod plot;
pub mod runner;

pub use config::{ExperimentConfig, Resolved, Study};
pub use error::{LabError, Result};
pub use runner::{run_experiment, ExperimentReport};

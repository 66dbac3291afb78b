//! Experiment harness for the federated simulator: TOML configs, runs over
//! seeds and algorithms, JSON-lines metrics, CSV summaries and comparison
//! tables.

pub mod compare;
pub mod config;
pub mod error;
pub mod metrics;
pub mod runner;

pub use config::{load_config, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use metrics::{rounds_to_target, MetricRecord, RunSummary};
pub use runner::{run_experiment, run_experiment_with_threads, run_single};

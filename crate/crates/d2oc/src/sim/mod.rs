//! Scenario configuration, Monte Carlo batch execution, metrics
//! persistence, and convergence diagnostics.

pub mod config;
pub mod diagnostics;
pub mod metrics;
pub mod runner;

pub use config::{load_config, parse_config, ScenarioConfig};
pub use diagnostics::{convergence_diagnostics, DecayFit, RESIDUAL_FRACTION_THRESHOLD};
pub use metrics::{emit_metrics, load_metrics, BatchBand, MetricsFormat, MetricsLog, RunSummary, StepRecord};
pub use runner::{run_batch, run_batch_sequential, run_scenario, BatchResult, RunLog, RunOutcome};

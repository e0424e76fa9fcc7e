//! Experiment orchestration: configuration, the training loop, and suites.

pub mod config;
pub mod suites;
pub mod train;

pub use config::{AblationMask, RunConfig};
pub use train::{evaluate, load_split, train, train_on_split, EvalReport, MetricsRecord, RunOutcome};

//! Training runs and the multi-run experiment protocols built on them.

pub mod config;
pub mod metrics;
pub mod stats;
pub mod sweep;
pub mod train;

pub use config::{Condition, DatasetSpec, TrainConfig};
pub use metrics::{read_metrics, write_metrics, MetricsRecord};
pub use sweep::{grid_search, seed_sweep, width_sweep, GridSummary, SeedSweep, SeedSweepSummary, WidthSummary};
pub use train::{run_training, train_on, RunArtifact, RunSummary};

//! Training, evaluation, gradient checking and ablation drivers behind the CLI.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod eval;
pub mod gradcheck;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{fingerprint, DataConfig, OptimConfig, Precision, RunConfig};
pub use dataset::Dataset;
pub use eval::{evaluate, MetricsReport};
pub use gradcheck::{gradcheck, GradReport, GradcheckOptions};
pub use train::{train, TrainOutcome};

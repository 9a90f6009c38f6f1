//! Optimizer, learning-rate schedule, checkpoints and the stage runner.

pub mod checkpoint;
pub mod optimizer;
pub mod runner;
pub mod schedule;

pub use checkpoint::{model_digest, Checkpoint};
pub use optimizer::{clip_global_norm, optimizer_step, AdamState, AdamWConfig};
pub use runner::{init_model, run_stage, write_metrics_csv, DataAudit, MetricsRow, RunConfig, RunInputs, RunOutput, Stage};
pub use schedule::{lr_at_step, scale_lr};

//! Metrics, out-of-time reports and the experiment harnesses built on them.

pub mod experiment;
pub mod metrics;
pub mod report;

pub use experiment::{
    ablation_run, oot_score, par_map, scaling_sweep, train_model, train_student, AblationRow, ExperimentData, OotScore,
    SweepAxis, SweepRow, SweepSpec, TrainPlan, Variant,
};
pub use metrics::{ks_stat, rmse, roc_auc};
pub use report::{monthly_oot_report, EvalReport, ReportRow};

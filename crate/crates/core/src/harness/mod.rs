//! Experiment orchestration: configuration, training runs, checkpoints,
//! metrics and comparisons.
//!
//! Every random draw in a run is keyed by `(data.seed, stream, step)`, so a
//! run is a pure function of its config and a run resumed from a checkpoint
//! continues the exact stream of an uninterrupted one.

mod compare;
mod config;
mod embed;
mod metrics;
mod train;

pub use compare::{
    desk_cells, desk_report, run_compare, run_desk_matrix, smoke_reduction, CellOutcome, CompareReport, CompareTarget,
    Speedup, DESK_TARGET, SMOKE_WINDOW,
};
pub use config::{
    DataConfig, EarlyStop, LossConfig, LossKind, OptimizerConfig, OptimizerKind, RunConfig, ScheduleConfig, ValMetric,
    DESK_ADAMW_LR, DESK_ETA_GAMMA,
};
pub use embed::{embedding_set, patient, seg_probe, seg_samples, FrozenEncoder, Patient, CONTRALATERAL_JITTER};
pub use metrics::{MetricsRecord, MetricsSink, Split};
pub use train::{batch_for_step, resume_pretrain, run_pretrain, split_seeds, Dataset, RunSummary, Sample, Trainer};

//! Optimisation, early stopping, metrics and multi-run harnesses.

mod adam;
mod fit;
mod metrics;
mod runs;
pub mod stats;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use fit::{
    evaluate, fit, predict, run_with_early_stopping, split_train_val, train_step, Decision,
    EarlyStopper, FitOutcome, Predictions, StopTrace, TrainConfig, EVAL_BATCH,
};
pub use metrics::{argmax, Metrics};
pub use runs::{
    grid_search, multi_seed_run, run_jobs, run_seed, GridEntry, GridPoint, GridResult, GridSpace,
    MultiSeedRun, Parallelism, RunReport, SeedOutcome, SeedReport, Splits,
};
pub use stats::{confidence_interval, Summary};

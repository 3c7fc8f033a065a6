//! SGD training, schedules, evaluation and checkpoints.

mod checkpoint;
mod optim;
mod run;

pub use checkpoint::{Checkpoint, SavedOptimizer, SavedParam, CHECKPOINT_VERSION};
pub use optim::{OptimizerState, Schedule};
pub use run::{evaluate, train, EpochRecord, Evaluation, RunLog, RunOptions, ScheduleKind, TrainConfig, LOG_HEADER};

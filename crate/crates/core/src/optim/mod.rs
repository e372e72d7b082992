//! Optimizers and the Adam → L-BFGS training pipeline.

pub mod adam;
pub mod lbfgs;
pub mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use lbfgs::{lbfgs_minimize, LbfgsConfig, LbfgsReport, LbfgsState, LbfgsStatus};
pub use train::{train, HistoryRow, Phase, TrainFailure, TrainOutcome, TrainPlan};

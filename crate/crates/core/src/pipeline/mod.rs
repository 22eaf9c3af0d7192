//! End-to-end experiments: generate buffers, train the value estimator, filter,
//! train the offline learner on both arms and evaluate on the target domain.
//!
//! Every random draw traces back to the master seed through [`stage_seed`].
//! Stages read and write fixed file names inside one output directory, so the
//! CLI stages run one after another produce the same files as `run`.

mod config;
mod experiments;
mod report;
mod stages;

pub use config::{BenchmarkConfig, DataConfig, EvaluationConfig, ExperimentKind, RemovalConfig, RunConfig};
pub use experiments::{run_removal_curve, run_single, run_transfer_benchmark, RemovalOutcome, TransferOutcome};
pub use experiments::{transfer_settings, RemovalPoint, TransferCell};
pub use report::{ArmReport, BehaviorSuccess, Seeds, BufferStats, CheckpointEval, DveSummary, RemovalRow, RunReport, TransferRow, ValueSummary};
pub use stages::*;

use thiserror::Error;

use crate::seeds::derive_seed;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {message}")]
    Stage { stage: &'static str, message: String },
}

impl PipelineError {
    pub(crate) fn stage(stage: &'static str) -> impl FnOnce(String) -> PipelineError {
        move |message| PipelineError::Stage { stage, message }
    }
}

/// Seed for one stage of one repetition: `derive_seed(master, [stage, label, rep])`.
pub fn stage_seed(master: u64, stage: &str, label: &str, repetition: usize) -> u64 {
    derive_seed(master, &[stage, label, &repetition.to_string()])
}

use serde::Serialize;

use super::RunConfig;
use crate::buffer::ReplayBuffer;
use crate::dve::DveHistory;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BufferStats {
    pub len: usize,
    pub domain_tag: String,
    pub terminal_fraction: f64,
    pub mean_reward: f64,
    pub distinct_states: usize,
}

impl BufferStats {
    pub fn of(buffer: &ReplayBuffer) -> Self {
        let n = buffer.len().max(1) as f64;
        let mut states: Vec<Vec<u64>> =
            buffer.transitions.iter().map(|t| t.state.iter().map(|x| x.to_bits()).collect()).collect();
        states.sort_unstable();
        states.dedup();
        Self {
            len: buffer.len(),
            domain_tag: buffer.domain_tag.clone(),
            terminal_fraction: buffer.transitions.iter().filter(|t| t.terminal).count() as f64 / n,
            mean_reward: buffer.transitions.iter().map(|t| t.reward).sum::<f64>() / n,
            distinct_states: states.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DveSummary {
    pub steps: usize,
    pub epochs: usize,
    pub knn_fallbacks: usize,
    pub final_r_rolling: f64,
    /// Mean `r_phi` over the first and the last epoch.
    pub first_epoch_mean_reward: f64,
    pub last_epoch_mean_reward: f64,
}

impl DveSummary {
    pub fn of(history: &DveHistory) -> Self {
        let epochs = history.steps.last().map_or(0, |s| s.epoch + 1);
        let epoch_mean = |e: usize| {
            let rs: Vec<f64> = history.steps.iter().filter(|s| s.epoch == e).map(|s| s.r_phi).collect();
            if rs.is_empty() {
                0.0
            } else {
                rs.iter().sum::<f64>() / rs.len() as f64
            }
        };
        Self {
            steps: history.steps.len(),
            epochs,
            knn_fallbacks: history.steps.iter().filter(|s| s.knn_fallback).count(),
            final_r_rolling: history.steps.last().map_or(0.0, |s| s.r_rolling),
            first_epoch_mean_reward: epoch_mean(0),
            last_epoch_mean_reward: epoch_mean(epochs.saturating_sub(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValueSummary {
    pub min: f64,
    pub median: f64,
    pub max: f64,
    pub mean: f64,
    pub threshold: f64,
    pub kept: usize,
    pub kept_fraction: f64,
}

impl ValueSummary {
    pub fn of(values: &[f64], threshold: f64) -> Self {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let kept = values.iter().filter(|&&w| w >= threshold).count();
        let at = |i: usize| sorted.get(i).copied().unwrap_or(f64::NAN);
        Self {
            min: at(0),
            median: if n == 0 { f64::NAN } else if n % 2 == 1 { at(n / 2) } else { 0.5 * (at(n / 2 - 1) + at(n / 2)) },
            max: at(n.wrapping_sub(1)),
            mean: values.iter().sum::<f64>() / n.max(1) as f64,
            threshold,
            kept,
            kept_fraction: kept as f64 / n.max(1) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointEval {
    pub iteration: usize,
    pub mean_return: f64,
    pub std_error: f64,
}

/// One learner arm: its training buffer, every checkpoint's evaluation and the best one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmReport {
    pub arm: String,
    pub buffer_len: usize,
    pub final_sup_norm_delta: Option<f64>,
    pub checkpoints: Vec<CheckpointEval>,
    pub best_iteration: usize,
    pub best_return: f64,
    pub best_std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub behavior_source: u64,
    pub behavior_target: u64,
    pub generate_source: u64,
    pub generate_target: u64,
    pub dve: u64,
    pub learner: u64,
    pub evaluate: u64,
}

/// Everything `run` reports. Wall-clock time is written separately so that the
/// report itself is a pure function of the config.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub seeds: Seeds,
    pub behavior_success: BehaviorSuccess,
    pub source: BufferStats,
    pub target: BufferStats,
    pub filtered: BufferStats,
    pub dve: DveSummary,
    pub values: ValueSummary,
    pub arms: Vec<ArmReport>,
    pub version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BehaviorSuccess {
    pub source_on_source: f64,
    pub target_on_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferRow {
    pub repetition: usize,
    pub setting: String,
    pub target_shift: f64,
    pub feature_mode: String,
    pub arm: String,
    pub buffer_len: usize,
    pub mean_return: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RemovalRow {
    pub repetition: usize,
    pub fraction: f64,
    pub side: String,
    pub buffer_len: usize,
    pub mean_return: f64,
    pub std_error: f64,
}

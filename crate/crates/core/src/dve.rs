//! Data value estimator training, valuation and filtering.
//!
//! Training walks the source buffer batch by batch. Each batch is scored by the
//! value network, a reciprocal-KL reward compares it with the whole target
//! buffer, and the network takes a REINFORCE step whose advantage is the reward
//! minus an exponential moving-average baseline. After training, every source
//! transition gets a value and the buffer is filtered by a selection threshold.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::{ReplayBuffer, Transition};
use crate::divergence::{self, DivergenceError, FeatureMode, KlEstimatorConfig, KlMethod};
use crate::neural::{NeuralError, ValueNet};
use crate::seeds::derive_seed;

#[derive(Debug, Error)]
pub enum DveError {
    #[error("source and target buffers are incompatible: {0}")]
    Incompatible(String),
    #[error("target buffer is empty")]
    EmptyTarget,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Divergence(#[from] DivergenceError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("values file: {0}")]
    Values(String),
}

/// How the selection vector entering the log-likelihood is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateMode {
    /// `s = w`, detached. The log-likelihood is stationary in `w` at `s = w`, so
    /// this mode produces no parameter movement beyond clamping effects.
    Soft,
    /// `s_i ~ Bernoulli(w_i)`, drawn once per batch.
    Bernoulli,
}

/// What the KL reward is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// The whole source batch, independent of the valuation.
    Batch,
    /// The source batch reweighted by the selection vector.
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientSign {
    /// `phi += alpha * r_sig * grad log pi`.
    Ascent,
    /// `phi -= alpha * r_sig * grad log pi`, the sign as printed in the original update rule.
    Descent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DveConfig {
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::hidden_layers")]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "defaults::window")]
    pub moving_average_window: usize,
    pub selection_threshold: f64,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::feature_mode")]
    pub feature_mode: FeatureMode,
    #[serde(default)]
    pub kl: KlEstimatorConfig,
    #[serde(default = "defaults::surrogate")]
    pub surrogate_mode: SurrogateMode,
    #[serde(default = "defaults::reward_mode")]
    pub reward_mode: RewardMode,
    #[serde(default = "defaults::gradient_sign")]
    pub gradient_sign: GradientSign,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    use super::*;
    pub fn batch_size() -> usize {
        200
    }
    pub fn hidden_layers() -> Vec<usize> {
        vec![128, 128]
    }
    pub fn window() -> usize {
        20
    }
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn feature_mode() -> FeatureMode {
        FeatureMode::StateActionNext
    }
    pub fn surrogate() -> SurrogateMode {
        SurrogateMode::Bernoulli
    }
    pub fn reward_mode() -> RewardMode {
        RewardMode::Weighted
    }
    pub fn gradient_sign() -> GradientSign {
        GradientSign::Ascent
    }
    pub fn epochs() -> usize {
        5
    }
}

impl Default for DveConfig {
    fn default() -> Self {
        Self {
            batch_size: defaults::batch_size(),
            hidden_layers: defaults::hidden_layers(),
            moving_average_window: defaults::window(),
            selection_threshold: 0.1,
            learning_rate: defaults::learning_rate(),
            feature_mode: defaults::feature_mode(),
            kl: KlEstimatorConfig::default(),
            surrogate_mode: defaults::surrogate(),
            reward_mode: defaults::reward_mode(),
            gradient_sign: defaults::gradient_sign(),
            epochs: defaults::epochs(),
            seed: 0,
        }
    }
}

impl DveConfig {
    pub fn validate(&self) -> Result<(), DveError> {
        let bad = |m: String| Err(DveError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.moving_average_window == 0 {
            return bad("moving_average_window must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.selection_threshold) {
            return bad(format!("selection_threshold {} outside [0, 1]", self.selection_threshold));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        self.kl.validate().map_err(DveError::Config)
    }
}

/// Moving-average reward baseline.
///
/// `observe` returns the advantage `r - r_rolling` and then folds `r` into the
/// average: `r_rolling <- (w - 1) / w * r_rolling + r / w`.
#[derive(Debug, Clone, PartialEq)]
pub struct RollingBaseline {
    window: f64,
    value: f64,
    steps: u64,
}

impl RollingBaseline {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1);
        Self { window: window as f64, value: 0.0, steps: 0 }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn observe(&mut self, reward: f64) -> f64 {
        let signal = reward - self.value;
        self.value = (self.window - 1.0) / self.window * self.value + 1.0 / self.window * reward;
        self.steps += 1;
        signal
    }
}

/// One training step of the estimator.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DveStep {
    pub step: usize,
    pub epoch: usize,
    pub kl: f64,
    pub r_phi: f64,
    pub r_sig: f64,
    /// Baseline after this step's update.
    pub r_rolling: f64,
    pub selected_fraction: f64,
    pub mean_value: f64,
    pub knn_fallback: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DveHistory {
    pub steps: Vec<DveStep>,
}

impl DveHistory {
    /// CSV with header `step,r_phi,r_sig,r_rolling`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), DveError> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "step,r_phi,r_sig,r_rolling")?;
        for s in &self.steps {
            writeln!(w, "{},{},{},{}", s.step, s.r_phi, s.r_sig, s.r_rolling)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Full-transition network input: state, action features, next state, reward, terminal.
pub fn transition_inputs(batch: &[Transition]) -> Array2<f64> {
    let Some(first) = batch.first() else {
        return Array2::zeros((0, 0));
    };
    let mut scratch = Vec::new();
    first.action.extend_features(&mut scratch);
    let width = 2 * first.state.len() + scratch.len() + 2;
    let mut data = Vec::with_capacity(batch.len() * width);
    for t in batch {
        data.extend_from_slice(&t.state);
        t.action.extend_features(&mut data);
        data.extend_from_slice(&t.next_state);
        data.push(t.reward);
        data.push(if t.terminal { 1.0 } else { 0.0 });
    }
    Array2::from_shape_vec((batch.len(), width), data).expect("buffer rows share dimensions")
}

pub fn input_dim(buffer: &ReplayBuffer) -> usize {
    2 * buffer.state_dim + buffer.action_spec.feature_width() + 2
}

fn check_compatible(source: &ReplayBuffer, target: &ReplayBuffer) -> Result<(), DveError> {
    if source.state_dim != target.state_dim {
        return Err(DveError::Incompatible(format!(
            "state_dim {} vs {}",
            source.state_dim, target.state_dim
        )));
    }
    if source.action_spec != target.action_spec {
        return Err(DveError::Incompatible(format!(
            "action spec {:?} vs {:?}",
            source.action_spec, target.action_spec
        )));
    }
    Ok(())
}

/// Trains the value network on `source` against `target` and returns it with the
/// per-step history.
pub fn train_dve(source: &ReplayBuffer, target: &ReplayBuffer, cfg: &DveConfig) -> Result<(ValueNet, DveHistory), DveError> {
    cfg.validate()?;
    check_compatible(source, target)?;
    if target.is_empty() {
        return Err(DveError::EmptyTarget);
    }
    let target_features = divergence::extract_features(&target.transitions, cfg.feature_mode)?;
    let mut net = ValueNet::init(input_dim(source), &cfg.hidden_layers, derive_seed(cfg.seed, &["dve", "init"]));
    net.fit_input_normalization(transition_inputs(&source.transitions).view())?;
    let mut selection_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &["dve", "selection"]));
    let mut baseline = RollingBaseline::new(cfg.moving_average_window);
    let sign = match cfg.gradient_sign {
        GradientSign::Ascent => 1.0,
        GradientSign::Descent => -1.0,
    };

    let mut history = DveHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in source.split_batches(cfg.batch_size) {
            let x = transition_inputs(batch);
            let w = net.forward(x.view())?;
            let s: Vec<f64> = match cfg.surrogate_mode {
                SurrogateMode::Soft => w.to_vec(),
                SurrogateMode::Bernoulli => {
                    w.iter().map(|&p| if selection_rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect()
                }
            };
            let features = divergence::extract_features(batch, cfg.feature_mode)?;
            let weights = match cfg.reward_mode {
                RewardMode::Batch => None,
                RewardMode::Weighted => Some(s.as_slice()),
            };
            let (kl, r_phi, fallback) = batch_reward(cfg, features.view(), weights, target_features.view(), step)?;
            let r_sig = baseline.observe(r_phi);
            let (_, grads) = net.logprob_grad(x.view(), &s)?;
            net.apply_update(&grads, sign * cfg.learning_rate * r_sig)?;

            history.steps.push(DveStep {
                step,
                epoch,
                kl,
                r_phi,
                r_sig,
                r_rolling: baseline.value(),
                selected_fraction: s.iter().sum::<f64>() / s.len() as f64,
                mean_value: w.mean().unwrap_or(0.0),
                knn_fallback: fallback,
            });
            step += 1;
        }
    }
    Ok((net, history))
}

/// KL, reward and whether k-NN fell back. An empty selection has no distribution
/// to compare and earns reward zero.
fn batch_reward(
    cfg: &DveConfig,
    features: ArrayView2<f64>,
    weights: Option<&[f64]>,
    target: ArrayView2<f64>,
    step: usize,
) -> Result<(f64, f64, bool), DveError> {
    if let Some(w) = weights {
        if w.iter().all(|&x| x == 0.0) {
            return Ok((f64::INFINITY, 0.0, false));
        }
    }
    let seed = derive_seed(cfg.seed, &["dve", "resample", &step.to_string()]);
    let est = divergence::estimate_kl(&cfg.kl, features, weights, target, seed)?;
    let fallback = matches!(cfg.kl.method, KlMethod::Knn { .. }) && est.method == KlMethod::GaussianFit;
    Ok((est.kl, divergence::reward_from_kl(est.kl, &cfg.kl), fallback))
}

/// A buffer with one value per transition, aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct ValuedBuffer<'a> {
    pub buffer: &'a ReplayBuffer,
    pub values: Vec<f64>,
}

/// Values every transition of `buffer`, batch by batch.
pub fn value_buffer<'a>(net: &ValueNet, buffer: &'a ReplayBuffer, batch_size: usize) -> Result<ValuedBuffer<'a>, DveError> {
    if batch_size == 0 {
        return Err(DveError::Config("batch_size must be at least 1".into()));
    }
    if !buffer.is_empty() && net.input_dim() != input_dim(buffer) {
        return Err(NeuralError::InputWidth { expected: net.input_dim(), found: input_dim(buffer) }.into());
    }
    let chunks: Vec<Vec<f64>> = buffer
        .transitions
        .par_chunks(batch_size)
        .map(|batch| net.forward(transition_inputs(batch).view()).map(|w| w.to_vec()))
        .collect::<Result<_, _>>()?;
    Ok(ValuedBuffer { buffer, values: chunks.concat() })
}

/// Keeps the transitions with `w_i >= threshold`, in order.
pub fn filter_buffer(vb: &ValuedBuffer<'_>, threshold: f64) -> ReplayBuffer {
    let kept = vb
        .buffer
        .transitions
        .iter()
        .zip(&vb.values)
        .filter(|(_, &w)| w >= threshold)
        .map(|(t, _)| t.clone())
        .collect();
    vb.buffer.derive(kept, format!("{}|filtered(eps={threshold})", vb.buffer.domain_tag))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalSide {
    Highest,
    Lowest,
}

impl RemovalSide {
    pub fn as_str(self) -> &'static str {
        match self {
            RemovalSide::Highest => "highest",
            RemovalSide::Lowest => "lowest",
        }
    }
}

/// Indices removed by [`exclude_fraction`]: the `floor(fraction * N)` most extreme
/// values on `side`, ties going to the lower index first.
pub fn excluded_indices(values: &[f64], fraction: f64, side: RemovalSide) -> Vec<usize> {
    let n = values.len();
    let count = ((fraction.clamp(0.0, 1.0) * n as f64).floor() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let by_value = match side {
            RemovalSide::Highest => values[b].total_cmp(&values[a]),
            RemovalSide::Lowest => values[a].total_cmp(&values[b]),
        };
        by_value.then(a.cmp(&b))
    });
    order.truncate(count);
    order.sort_unstable();
    order
}

/// Removes the `floor(fraction * N)` highest- or lowest-valued transitions.
pub fn exclude_fraction(vb: &ValuedBuffer<'_>, fraction: f64, side: RemovalSide) -> ReplayBuffer {
    let removed = excluded_indices(&vb.values, fraction, side);
    let mut drop = vec![false; vb.values.len()];
    removed.iter().for_each(|&i| drop[i] = true);
    let kept = vb.buffer.transitions.iter().zip(&drop).filter(|(_, &d)| !d).map(|(t, _)| t.clone()).collect();
    vb.buffer.derive(kept, format!("{}|excluded({},{fraction})", vb.buffer.domain_tag, side.as_str()))
}

/// Writes `index,w` rows with round-trip exact reals.
pub fn write_values_csv(values: &[f64], path: impl AsRef<Path>) -> Result<(), DveError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "index,w")?;
    for (i, v) in values.iter().enumerate() {
        writeln!(w, "{i},{v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_values_csv(path: impl AsRef<Path>) -> Result<Vec<f64>, DveError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("index,w") {
        return Err(DveError::Values("missing `index,w` header".into()));
    }
    let mut values = Vec::new();
    for (n, line) in lines.enumerate() {
        let (idx, w) = line.split_once(',').ok_or_else(|| DveError::Values(format!("line {}: expected two fields", n + 2)))?;
        let idx: usize = idx.trim().parse().map_err(|e| DveError::Values(format!("line {}: {e}", n + 2)))?;
        if idx != values.len() {
            return Err(DveError::Values(format!("line {}: index {idx} out of sequence", n + 2)));
        }
        values.push(w.trim().parse().map_err(|e| DveError::Values(format!("line {}: {e}", n + 2)))?);
    }
    Ok(values)
}

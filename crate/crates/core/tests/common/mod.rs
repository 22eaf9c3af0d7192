//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use dvorl_core::buffer::{ActionSpec, ReplayBuffer, Transition};
use dvorl_core::neural::ValueNet;
use dvorl_core::pipeline::RunConfig;
use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

pub fn load_config(name: &str) -> RunConfig {
    RunConfig::load(config_path(name)).expect("shipped config parses")
}

/// The shipped cliff-walk config scaled down to run in about a second.
pub fn small_config() -> RunConfig {
    let mut cfg = load_config("cliff_walk.toml");
    cfg.data.source_size = 1500;
    cfg.data.target_size = 200;
    cfg.behavior.episodes = 500;
    cfg.dve.epochs = 2;
    cfg.dve.hidden_layers = vec![16, 16];
    cfg.evaluation.episodes = 20;
    cfg.learner.iterations = 40;
    cfg.benchmark.repetitions = 1;
    cfg.removal.repetitions = 1;
    cfg
}

/// `n` draws from `N(mean, I)` in `mean.len()` dimensions.
pub fn normal_samples(n: usize, mean: &[f64], seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_fn((n, mean.len()), |(_, j)| mean[j] + Distribution::<f64>::sample(&StandardNormal, &mut r))
}

/// `KL(N(a, I) || N(b, I)) = |a - b|^2 / 2`.
pub fn unit_gaussian_kl(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / 2.0
}

/// Moving average written out as `v_t = (w - 1) / w * v_{t-1} + 1 / w * r_t`, `v_0 = 0`.
/// Returns `(r_t - v_{t-1}, v_t)` per step.
pub fn baseline_oracle(rewards: &[f64], window: usize) -> Vec<(f64, f64)> {
    let w = window as f64;
    let mut v = 0.0;
    let mut out = Vec::new();
    for &r in rewards {
        let sig = r - v;
        v = (w - 1.0) / w * v + 1.0 / w * r;
        out.push((sig, v));
    }
    out
}

/// Indices kept by the selection rule, found by scanning every index.
pub fn kept_indices_oracle(values: &[f64], threshold: f64) -> Vec<usize> {
    let mut kept = Vec::new();
    for i in 0..values.len() {
        if !(values[i] < threshold) {
            kept.push(i);
        }
    }
    kept
}

/// `sum_i s_i ln w_i + (1 - s_i) ln(1 - w_i)` from the forward pass alone.
pub fn bernoulli_loglik(net: &ValueNet, x: ArrayView2<f64>, s: &[f64]) -> f64 {
    let w = net.forward(x).unwrap();
    w.iter()
        .zip(s)
        .map(|(&w, &s)| {
            let w = w.clamp(1e-6, 1.0 - 1e-6);
            s * w.ln() + (1.0 - s) * (1.0 - w).ln()
        })
        .sum()
}

/// Central finite differences of [`bernoulli_loglik`] over the flat parameters.
pub fn finite_difference_grad(net: &ValueNet, x: ArrayView2<f64>, s: &[f64], h: f64) -> Vec<f64> {
    let base = net.flat_params();
    let mut probe = net.clone();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        probe.set_flat_params(&p);
        let up = bernoulli_loglik(&probe, x, s);
        p[i] = base[i] - h;
        probe.set_flat_params(&p);
        let down = bernoulli_loglik(&probe, x, s);
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// Deterministic two-state chain with states `[0.0]` and `[1.0]` and two actions.
/// Action 0 moves to state 0, action 1 to state 1; rewards are
/// `r(0, 0) = 0, r(0, 1) = 1, r(1, 0) = 0, r(1, 1) = 2`.
pub fn two_state_chain() -> ReplayBuffer {
    let reward = [[0.0, 1.0], [0.0, 2.0]];
    let mut transitions = Vec::new();
    for s in 0..2u32 {
        for a in 0..2u32 {
            transitions.push(Transition::discrete(vec![s as f64], a, vec![a as f64], reward[s as usize][a as usize], false));
        }
    }
    ReplayBuffer::with_transitions(1, ActionSpec::Discrete { n_actions: 2 }, "two-state-chain", transitions)
}

/// Optimal Q of [`two_state_chain`] solved by hand: staying in state 1 forever
/// is optimal, so `V(1) = 2 / (1 - g)` and `V(0) = 1 + g V(1)`.
pub fn two_state_chain_q(gamma: f64) -> [[f64; 2]; 2] {
    let v1 = 2.0 / (1.0 - gamma);
    let v0 = 1.0 + gamma * v1;
    [[gamma * v0, 1.0 + gamma * v1], [gamma * v0, 2.0 + gamma * v1]]
}

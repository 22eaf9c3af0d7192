//! Comparison features and KL-divergence estimation between a source batch and
//! the target buffer.
//!
//! The k-nearest-neighbour estimator is the default; the diagonal Gaussian fit is
//! an analytic fallback and the oracle the k-NN estimator is tested against.

use ndarray::{Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::buffer::Transition;

/// Variance floor for the Gaussian moment fit.
pub const GAUSSIAN_VAR_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DivergenceError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("too few samples: need at least {needed} rows, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("cannot extract features from an empty batch")]
    EmptyBatch,
}

/// Which parts of a transition enter the divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// `x` only: width `m`.
    StateOnly,
    /// `(x, u, x')`: width `m + a + m`.
    StateActionNext,
}

impl FeatureMode {
    pub fn width(self, state_dim: usize, action_width: usize) -> usize {
        match self {
            FeatureMode::StateOnly => state_dim,
            FeatureMode::StateActionNext => 2 * state_dim + action_width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KlMethod {
    Knn { k: usize },
    GaussianFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimatorConfig {
    pub method: KlMethod,
    /// Minimum KL before taking the reciprocal.
    pub clamp_floor: f64,
    /// Half-width of the deterministic uniform perturbation added to every feature
    /// before k-NN search. Lattice-valued features repeat exactly, and the k-NN
    /// estimator needs distinct points; keep it below the lattice spacing. Zero
    /// disables it.
    #[serde(default = "default_jitter")]
    pub tie_jitter: f64,
    #[serde(default)]
    pub selection: SelectionSampling,
}

/// How 0/1 weights pick the source rows for the k-NN estimate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionSampling {
    /// The selected rows themselves. Small selections bias the estimate low.
    Subset,
    /// As many rows as the batch, drawn with replacement from the selected ones,
    /// so the estimate always sees the same sample size.
    #[default]
    Resample,
}

fn default_jitter() -> f64 {
    0.1
}

impl Default for KlEstimatorConfig {
    fn default() -> Self {
        Self { method: KlMethod::Knn { k: 5 }, clamp_floor: 1e-3, tie_jitter: default_jitter(), selection: SelectionSampling::Resample }
    }
}

impl KlEstimatorConfig {
    pub fn reward_cap(&self) -> f64 {
        1.0 / self.clamp_floor
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.clamp_floor > 0.0 && self.clamp_floor.is_finite()) {
            return Err(format!("clamp_floor must be positive, got {}", self.clamp_floor));
        }
        if let KlMethod::Knn { k } = self.method {
            if k == 0 {
                return Err("knn k must be at least 1".into());
            }
        }
        if !(self.tie_jitter >= 0.0 && self.tie_jitter.is_finite()) {
            return Err(format!("tie_jitter must be non-negative, got {}", self.tie_jitter));
        }
        Ok(())
    }
}

/// Stacks the comparison features of `batch` row by row. Reward and terminal
/// flags never enter; discrete actions occupy a single coordinate.
pub fn extract_features(batch: &[Transition], mode: FeatureMode) -> Result<Array2<f64>, DivergenceError> {
    let first = batch.first().ok_or(DivergenceError::EmptyBatch)?;
    let m = first.state.len();
    let mut scratch = Vec::new();
    first.action.extend_features(&mut scratch);
    let a = scratch.len();
    let width = mode.width(m, a);

    let mut data = Vec::with_capacity(batch.len() * width);
    for (i, t) in batch.iter().enumerate() {
        if t.state.len() != m || t.next_state.len() != m {
            return Err(DivergenceError::Dimension(format!("row {i} has state length {} (expected {m})", t.state.len())));
        }
        data.extend_from_slice(&t.state);
        if mode == FeatureMode::StateActionNext {
            let before = data.len();
            t.action.extend_features(&mut data);
            if data.len() - before != a {
                return Err(DivergenceError::Dimension(format!("row {i} action width differs from row 0")));
            }
            data.extend_from_slice(&t.next_state);
        }
    }
    Ok(Array2::from_shape_vec((batch.len(), width), data).expect("row widths checked above"))
}

/// k-th smallest squared distance from `point` to the `d`-wide rows packed in
/// `set`, skipping row `skip`.
fn kth_sq_dist(point: &[f64], set: &[f64], d: usize, k: usize, skip: Option<usize>) -> f64 {
    // Ascending list of the k smallest distances seen so far.
    let mut best = vec![f64::INFINITY; k];
    for (j, row) in set.chunks_exact(d).enumerate() {
        let dist: f64 = point.iter().zip(row).map(|(x, y)| (x - y) * (x - y)).sum();
        if dist < best[k - 1] && Some(j) != skip {
            let pos = best.partition_point(|&b| b <= dist);
            best.insert(pos, dist);
            best.pop();
        }
    }
    best[k - 1]
}

/// k-nearest-neighbour estimate of `D(P || Q)` from samples, clamped at zero.
///
/// With `n` rows in `p`, `m` rows in `q` and feature dimension `d`:
/// `(d / n) * sum_i ln(nu_k(i) / rho_k(i)) + ln(m / (n - 1))`, where `rho_k(i)` is the
/// distance from `p_i` to its k-th neighbour among the other rows of `p` and `nu_k(i)`
/// its distance to the k-th neighbour in `q`. Zero distances are floored at the
/// smallest positive normal so the result stays finite.
pub fn kl_knn(p: ArrayView2<f64>, q: ArrayView2<f64>, k: usize) -> Result<f64, DivergenceError> {
    if k == 0 {
        return Err(DivergenceError::TooFewSamples { needed: 1, got: 0 });
    }
    if p.ncols() != q.ncols() {
        return Err(DivergenceError::Dimension(format!("p has {} columns, q has {}", p.ncols(), q.ncols())));
    }
    for rows in [p.nrows(), q.nrows()] {
        if rows < k + 1 {
            return Err(DivergenceError::TooFewSamples { needed: k + 1, got: rows });
        }
    }
    let n = p.nrows();
    let width = p.ncols();
    let d = width as f64;
    let (p, q) = (p.as_standard_layout(), q.as_standard_layout());
    let (ps, qs) = (p.as_slice().expect("standard layout"), q.as_slice().expect("standard layout"));
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = &ps[i * width..(i + 1) * width];
            let rho = kth_sq_dist(row, ps, width, k, Some(i)).max(f64::MIN_POSITIVE);
            let nu = kth_sq_dist(row, qs, width, k, None).max(f64::MIN_POSITIVE);
            0.5 * (nu / rho).ln()
        })
        .collect();
    let sum: f64 = terms.iter().sum();
    let estimate = d / n as f64 * sum + (q.nrows() as f64 / (n as f64 - 1.0)).ln();
    Ok(estimate.max(0.0))
}

/// Weighted per-column mean and population variance (variance floored).
fn diag_moments(x: ArrayView2<f64>, weights: Option<&[f64]>) -> (Vec<f64>, Vec<f64>) {
    let uniform;
    let w = match weights {
        Some(w) => w,
        None => {
            uniform = vec![1.0; x.nrows()];
            &uniform
        }
    };
    let total: f64 = w.iter().sum();
    let mut mean = vec![0.0; x.ncols()];
    for (row, &wi) in x.outer_iter().zip(w) {
        for (m, v) in mean.iter_mut().zip(row.iter()) {
            *m += wi * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut var = vec![0.0; x.ncols()];
    for (row, &wi) in x.outer_iter().zip(w) {
        for ((s, v), m) in var.iter_mut().zip(row.iter()).zip(&mean) {
            *s += wi * (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s = (*s / total).max(GAUSSIAN_VAR_FLOOR));
    (mean, var)
}

fn gaussian_kl_closed_form(mp: &[f64], vp: &[f64], mq: &[f64], vq: &[f64]) -> f64 {
    let kl: f64 = mp
        .iter()
        .zip(vp)
        .zip(mq.iter().zip(vq))
        .map(|((mp, vp), (mq, vq))| 0.5 * ((vq / vp).ln() + (vp + (mp - mq) * (mp - mq)) / vq - 1.0))
        .sum();
    kl.max(0.0)
}

/// KL between diagonal Gaussians fitted to `p` and `q` by moments.
pub fn kl_gaussian(p: ArrayView2<f64>, q: ArrayView2<f64>) -> Result<f64, DivergenceError> {
    kl_gaussian_weighted(p, None, q)
}

/// As [`kl_gaussian`], with the source moments weighted per row.
pub fn kl_gaussian_weighted(p: ArrayView2<f64>, weights: Option<&[f64]>, q: ArrayView2<f64>) -> Result<f64, DivergenceError> {
    if p.ncols() != q.ncols() {
        return Err(DivergenceError::Dimension(format!("p has {} columns, q has {}", p.ncols(), q.ncols())));
    }
    for rows in [p.nrows(), q.nrows()] {
        if rows < 2 {
            return Err(DivergenceError::TooFewSamples { needed: 2, got: rows });
        }
    }
    if let Some(w) = weights {
        if w.len() != p.nrows() {
            return Err(DivergenceError::Dimension(format!("{} weights for {} rows", w.len(), p.nrows())));
        }
        if !(w.iter().sum::<f64>() > 0.0) {
            return Err(DivergenceError::TooFewSamples { needed: 1, got: 0 });
        }
    }
    let (mp, vp) = diag_moments(p, weights);
    let (mq, vq) = diag_moments(q, None);
    Ok(gaussian_kl_closed_form(&mp, &vp, &mq, &vq))
}

/// Reciprocal-KL reward: `1 / max(kl, clamp_floor)`.
pub fn reward_from_kl(kl: f64, cfg: &KlEstimatorConfig) -> f64 {
    1.0 / kl.max(cfg.clamp_floor)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Adds a deterministic uniform perturbation in `[-half_width, half_width]`,
/// a function of (stream, row, column) only.
fn jitter(x: &mut Array2<f64>, half_width: f64, stream: u64) {
    if half_width == 0.0 {
        return;
    }
    let cols = x.ncols() as u64;
    for ((r, c), v) in x.indexed_iter_mut() {
        let h = splitmix64(stream.wrapping_mul(0x1000_0000_01b3) ^ splitmix64(r as u64 * cols + c as u64));
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        *v += half_width * (2.0 * u - 1.0);
    }
}

/// Outcome of a configured KL estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEstimate {
    pub kl: f64,
    /// Method actually used, which differs from the configured one after a fallback.
    pub method: KlMethod,
}

/// Estimates `D(source || target)` under `cfg`.
///
/// `weights`, when given, reweights the source rows: moment weights for the
/// Gaussian fit, and for k-NN either the selected subset (0/1 weights) or a
/// resample of the batch proportional to the weights drawn with `resample_seed`.
/// k-NN falls back to the Gaussian fit when either side is too small.
pub fn estimate_kl(
    cfg: &KlEstimatorConfig,
    source: ArrayView2<f64>,
    weights: Option<&[f64]>,
    target: ArrayView2<f64>,
    resample_seed: u64,
) -> Result<KlEstimate, DivergenceError> {
    if source.ncols() != target.ncols() {
        return Err(DivergenceError::Dimension(format!(
            "source features have {} columns, target {}",
            source.ncols(),
            target.ncols()
        )));
    }
    if let Some(w) = weights {
        if w.len() != source.nrows() {
            return Err(DivergenceError::Dimension(format!("{} weights for {} rows", w.len(), source.nrows())));
        }
    }
    let KlMethod::Knn { k } = cfg.method else {
        let kl = kl_gaussian_weighted(source, weights, target)?;
        return Ok(KlEstimate { kl, method: KlMethod::GaussianFit });
    };

    let mut p = match weights {
        None => source.to_owned(),
        Some(w) if cfg.selection == SelectionSampling::Subset && w.iter().all(|&x| x == 0.0 || x == 1.0) => {
            let keep: Vec<usize> = (0..w.len()).filter(|&i| w[i] == 1.0).collect();
            source.select(Axis(0), &keep)
        }
        Some(w) => {
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(DivergenceError::TooFewSamples { needed: 1, got: 0 });
            }
            let mut cdf = Vec::with_capacity(w.len());
            let mut acc = 0.0;
            for x in w {
                acc += x / total;
                cdf.push(acc);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(resample_seed);
            let picks: Vec<usize> = (0..w.len())
                .map(|_| {
                    let u: f64 = rng.random();
                    cdf.partition_point(|&c| c < u).min(w.len() - 1)
                })
                .collect();
            source.select(Axis(0), &picks)
        }
    };

    if p.nrows() < k + 1 || target.nrows() < k + 1 {
        log::warn!(
            "k-NN KL needs {} rows per side (source {}, target {}); falling back to the Gaussian fit",
            k + 1,
            p.nrows(),
            target.nrows()
        );
        let kl = kl_gaussian_weighted(source, weights, target)?;
        return Ok(KlEstimate { kl, method: KlMethod::GaussianFit });
    }
    let mut q = target.to_owned();
    jitter(&mut p, cfg.tie_jitter, 1);
    jitter(&mut q, cfg.tie_jitter, 2);
    Ok(KlEstimate { kl: kl_knn(p.view(), q.view(), k)?, method: cfg.method })
}

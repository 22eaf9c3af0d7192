//! Feed-forward value network with hand-written backpropagation.
//!
//! Hidden layers use ReLU and the single output unit is a sigmoid, so every
//! value lies in (0, 1). The Bernoulli log-likelihood of a selection vector and
//! its gradient give the REINFORCE surrogate used to train the estimator.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// `w` is clamped to `[LOG_CLAMP, 1 - LOG_CLAMP]` inside the logarithms.
pub const LOG_CLAMP: f64 = 1e-6;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DVNN";
pub const CHECKPOINT_VERSION: u8 = 2;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("input has {found} columns, network expects {expected}")]
    InputWidth { expected: usize, found: usize },
    #[error("selection vector has {found} entries for a batch of {expected}")]
    SelectionLength { expected: usize, found: usize },
    #[error("gradient shapes do not match the network")]
    Shape,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in x fan_out`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Data value estimator body: `input -> hidden... -> 1`, ReLU then sigmoid.
///
/// Inputs first pass through a fixed affine map `(x - offset) / scale`, identity
/// unless set with [`ValueNet::set_input_normalization`]. It is not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet {
    layers: Vec<Layer>,
    input_offset: Array1<f64>,
    input_scale: Array1<f64>,
}

/// Per-parameter gradients, congruent with the owning [`ValueNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub layers: Vec<Layer>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl ValueNet {
    /// Glorot-uniform weights (bound `sqrt(6 / (fan_in + fan_out))`), zero biases.
    ///
    /// # Panics
    /// If any size is zero.
    pub fn init(input_dim: usize, hidden: &[usize], seed: u64) -> Self {
        let sizes = Self::sizes_for(input_dim, hidden);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                Layer {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-bound..bound)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self::with_identity_input(layers, input_dim)
    }

    fn with_identity_input(layers: Vec<Layer>, input_dim: usize) -> Self {
        Self { layers, input_offset: Array1::zeros(input_dim), input_scale: Array1::ones(input_dim) }
    }

    /// All parameters zero; every output is exactly 0.5.
    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let sizes = Self::sizes_for(input_dim, hidden);
        let layers = sizes
            .windows(2)
            .map(|w| Layer { weights: Array2::zeros((w[0], w[1])), bias: Array1::zeros(w[1]) })
            .collect();
        Self::with_identity_input(layers, input_dim)
    }

    fn sizes_for(input_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        assert!(sizes.iter().all(|&s| s >= 1), "layer sizes must be positive: {sizes:?}");
        sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    /// `[input, hidden..., 1]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.weights.ncols()));
        s
    }

    /// Standardizes inputs with the column means and standard deviations of `x`.
    /// Constant columns keep scale 1.
    pub fn fit_input_normalization(&mut self, x: ArrayView2<f64>) -> Result<(), NeuralError> {
        self.check_input(x)?;
        let n = x.nrows().max(1) as f64;
        let mean = x.sum_axis(Axis(0)) / n;
        let mut scale = Array1::ones(x.ncols());
        for (j, col) in x.axis_iter(Axis(1)).enumerate() {
            let sd = (col.iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n).sqrt();
            if sd > 0.0 {
                scale[j] = sd;
            }
        }
        self.set_input_normalization(mean, scale)
    }

    pub fn set_input_normalization(&mut self, offset: Array1<f64>, scale: Array1<f64>) -> Result<(), NeuralError> {
        let d = self.input_dim();
        if offset.len() != d || scale.len() != d {
            return Err(NeuralError::Shape);
        }
        if scale.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(NeuralError::Format("input scales must be positive and finite".into()));
        }
        self.input_offset = offset;
        self.input_scale = scale;
        Ok(())
    }

    pub fn input_normalization(&self) -> (&Array1<f64>, &Array1<f64>) {
        (&self.input_offset, &self.input_scale)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer (weights row-major, then bias).
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weights.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.param_count());
        let mut it = params.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|p| *p = it.next().unwrap());
        }
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<(), NeuralError> {
        if x.ncols() != self.input_dim() {
            return Err(NeuralError::InputWidth { expected: self.input_dim(), found: x.ncols() });
        }
        Ok(())
    }

    /// Activations of every layer; the last entry holds the output logits.
    fn pre_activations(&self, x: ArrayView2<f64>) -> (Vec<Array2<f64>>, Array1<f64>) {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut current = (&x - &self.input_offset) / &self.input_scale;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = current.dot(&l.weights);
            z += &l.bias;
            acts.push(current);
            if i < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            current = z;
        }
        let logits = current.index_axis_move(Axis(1), 0);
        (acts, logits)
    }

    /// Per-row values in (0, 1).
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array1<f64>, NeuralError> {
        self.check_input(x)?;
        Ok(self.pre_activations(x).1.mapv(sigmoid))
    }

    /// Bernoulli log-likelihood `sum_i s_i ln w_i + (1 - s_i) ln(1 - w_i)` of the
    /// selection vector `s` under `w = forward(x)`, and its gradient.
    ///
    /// `s` is treated as a constant. Outside the clamp range the clamped logs are
    /// flat, so those rows contribute no gradient.
    pub fn logprob_grad(&self, x: ArrayView2<f64>, s: &[f64]) -> Result<(f64, GradientBundle), NeuralError> {
        self.check_input(x)?;
        if s.len() != x.nrows() {
            return Err(NeuralError::SelectionLength { expected: x.nrows(), found: s.len() });
        }
        let (acts, logits) = self.pre_activations(x);
        let mut logprob = 0.0;
        let mut delta = Array2::zeros((x.nrows(), 1));
        for (i, (&z, &si)) in logits.iter().zip(s).enumerate() {
            let w = sigmoid(z);
            let wc = w.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP);
            logprob += si * wc.ln() + (1.0 - si) * (1.0 - wc).ln();
            // d/dz [s ln w + (1-s) ln(1-w)] = s - w for a sigmoid output.
            delta[[i, 0]] = if w == wc { si - w } else { 0.0 };
        }

        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for (l, a) in self.layers.iter().zip(&acts).rev() {
            let gw = a.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            let back = delta.dot(&l.weights.t());
            grads.push(Layer { weights: gw, bias: gb });
            // ReLU derivative of the layer below, read off its (post-ReLU) output.
            delta = back * &a.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        }
        grads.reverse();
        Ok((logprob, GradientBundle { layers: grads }))
    }

    /// `params += scale * grads`.
    pub fn apply_update(&mut self, grads: &GradientBundle, scale: f64) -> Result<(), NeuralError> {
        let congruent = grads.layers.len() == self.layers.len()
            && self
                .layers
                .iter()
                .zip(&grads.layers)
                .all(|(l, g)| l.weights.dim() == g.weights.dim() && l.bias.dim() == g.bias.dim());
        if !congruent {
            return Err(NeuralError::Shape);
        }
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weights.scaled_add(scale, &g.weights);
            l.bias.scaled_add(scale, &g.bias);
        }
        Ok(())
    }

    /// Checkpoint layout, little-endian: `"DVNN"`, `u8` version, `u32` number of
    /// layer sizes, that many `u32` sizes, the input offsets and scales (one `f64`
    /// per input each), then [`Self::flat_params`] as `f64`.
    pub fn write_to(&self, w: &mut impl Write) -> Result<(), NeuralError> {
        let sizes = self.layer_sizes();
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        w.write_all(&(sizes.len() as u32).to_le_bytes())?;
        for s in &sizes {
            w.write_all(&(*s as u32).to_le_bytes())?;
        }
        for p in self.input_offset.iter().chain(self.input_scale.iter()).copied().chain(self.flat_params()) {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(bytes: &[u8]) -> Result<Self, NeuralError> {
        let fail = |m: &str| NeuralError::Format(m.to_owned());
        if bytes.len() < 9 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(fail("missing DVNN magic"));
        }
        if bytes[4] != CHECKPOINT_VERSION {
            return Err(NeuralError::Format(format!("unsupported version {}", bytes[4])));
        }
        let n = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        if n < 2 || bytes.len() < 9 + 4 * n {
            return Err(fail("truncated layer size table"));
        }
        let sizes: Vec<usize> = bytes[9..9 + 4 * n]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        if sizes.contains(&0) || *sizes.last().unwrap() != 1 {
            return Err(fail("layer sizes must be positive and end in 1"));
        }
        let mut net = Self::zeros(sizes[0], &sizes[1..n - 1]);
        let payload = &bytes[9 + 4 * n..];
        let d = sizes[0];
        let expected = 8 * (2 * d + net.param_count());
        if payload.len() != expected {
            return Err(NeuralError::Format(format!("expected {expected} parameter bytes, found {}", payload.len())));
        }
        let values: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        net.set_input_normalization(Array1::from(values[..d].to_vec()), Array1::from(values[d..2 * d].to_vec()))?;
        net.set_flat_params(&values[2 * d..]);
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NeuralError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NeuralError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::read_from(&bytes)
    }
}

impl GradientBundle {
    pub fn flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied()).collect()
    }
}

//! Dense matrices, three-layer perceptrons with hand-written backward
//! passes, distribution heads and the optimizers used in training.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Rng};

pub const LOG_STD_MIN: f64 = -6.0;
pub const LOG_STD_MAX: f64 = 4.0;
pub const DEFAULT_HIDDEN: usize = 50;
pub const DEFAULT_LATENT: usize = 10;
pub const DEFAULT_LR: f64 = 0.001;
pub const CHECKPOINT_VERSION: u32 = 1;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("cache was produced by a different network or parameter version")]
    StaleCache,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

fn check_len(expected: usize, got: usize) -> Result<(), NdError> {
    if expected == got {
        Ok(())
    } else {
        Err(NdError::ShapeMismatch { expected, got })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NdError> {
        check_len(rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += yr * w;
            }
        }
        out
    }

    /// `self += a · bᵀ`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (x, &bc) in row.iter_mut().zip(b) {
                *x += ar * bc;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum with pairwise splitting; result does not depend on thread schedule
/// and has `O(log n)` error growth.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 8 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    /// No nonlinearity; used to test the linear closed forms.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Derivative given pre-activation `x` and post-activation `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

/// Input → hidden → hidden → output perceptron with a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: [usize; 4],
    weights: [Matrix; 3],
    biases: [Vec<f64>; 3],
    activation: Activation,
    id: u64,
    version: u64,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    id: u64,
    version: u64,
    input: Vec<f64>,
    pre: [Vec<f64>; 2],
    post: [Vec<f64>; 2],
}

/// Gradients aligned with an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    pub weights: [Matrix; 3],
    pub biases: [Vec<f64>; 3],
}

impl GradientTape {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.weights.clone().map(|w| Matrix::zeros(w.rows, w.cols)),
            biases: net.biases.clone().map(|b| vec![0.0; b.len()]),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.iter().map(|w| w.data.len()).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters in canonical order: W1, b1, W2, b2, W3, b3.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        (0..3).flat_map(move |l| self.weights[l].data.iter().chain(self.biases[l].iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        let Self { weights, biases } = self;
        weights.iter_mut().zip(biases.iter_mut()).flat_map(|(w, b)| w.data.iter_mut().chain(b.iter_mut()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.iter().map(|g| g * g).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|g| *g *= s);
    }

    pub fn add_assign(&mut self, other: &GradientTape) {
        self.iter_mut().zip(other.iter()).for_each(|(a, b)| *a += b);
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|g| g.is_finite())
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(input: usize, hidden: usize, output: usize, activation: Activation, rng: &mut Rng) -> Self {
        let sizes = [input, hidden, hidden, output];
        let weights = [0, 1, 2].map(|l| {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| limit * (2.0 * rng::uniform(rng) - 1.0)).collect();
            Matrix { rows: fan_out, cols: fan_in, data }
        });
        let biases = [1, 2, 3].map(|l| vec![0.0; sizes[l]]);
        Self::from_parts(weights, biases, activation).expect("shapes chain by construction")
    }

    pub fn from_parts(weights: [Matrix; 3], biases: [Vec<f64>; 3], activation: Activation) -> Result<Self, NdError> {
        let sizes = [weights[0].cols, weights[0].rows, weights[1].rows, weights[2].rows];
        for l in 0..3 {
            check_len(sizes[l], weights[l].cols)?;
            check_len(sizes[l + 1], weights[l].rows)?;
            check_len(sizes[l + 1], biases[l].len())?;
        }
        check_len(sizes[1], sizes[2])?;
        if weights.iter().any(|w| w.data.iter().any(|x| !x.is_finite())) || biases.iter().flatten().any(|x| !x.is_finite())
        {
            return Err(NdError::NonFinite("parameters"));
        }
        Ok(Self { sizes, weights, biases, activation, id: NEXT_NET_ID.fetch_add(1, Ordering::Relaxed), version: 0 })
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.sizes[1]
    }

    pub fn output_size(&self) -> usize {
        self.sizes[3]
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[Matrix; 3] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>; 3] {
        &self.biases
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(|w| w.data.len()).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameters in the same order as [`GradientTape::iter`].
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        (0..3).flat_map(move |l| self.weights[l].data.iter().chain(self.biases[l].iter()))
    }

    /// Mutable parameter access. Invalidates outstanding forward caches.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.version += 1;
        let Self { weights, biases, .. } = self;
        weights.iter_mut().zip(biases.iter_mut()).flat_map(|(w, b)| w.data.iter_mut().chain(b.iter_mut()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache), NdError> {
        check_len(self.sizes[0], x.len())?;
        let mut pre: [Vec<f64>; 2] = Default::default();
        let mut post: [Vec<f64>; 2] = Default::default();
        let mut h = x.to_vec();
        for l in 0..2 {
            let mut z = self.weights[l].matvec(&h);
            z.iter_mut().zip(&self.biases[l]).for_each(|(z, b)| *z += b);
            let a: Vec<f64> = z.iter().map(|&v| self.activation.apply(v)).collect();
            pre[l] = z;
            post[l] = a.clone();
            h = a;
        }
        let mut out = self.weights[2].matvec(&h);
        out.iter_mut().zip(&self.biases[2]).for_each(|(o, b)| *o += b);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(NdError::NonFinite("network output"));
        }
        Ok((out, ForwardCache { id: self.id, version: self.version, input: x.to_vec(), pre, post }))
    }

    /// Gradients of `⟨upstream, output⟩` with respect to every parameter and
    /// to the input.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<(GradientTape, Vec<f64>), NdError> {
        if cache.id != self.id || cache.version != self.version {
            return Err(NdError::StaleCache);
        }
        check_len(self.sizes[3], upstream.len())?;
        let mut tape = GradientTape::zeros_like(self);
        let mut delta = upstream.to_vec();
        for l in (0..3).rev() {
            let input = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            tape.weights[l].add_outer(&delta, input);
            tape.biases[l].copy_from_slice(&delta);
            let back = self.weights[l].t_matvec(&delta);
            if l == 0 {
                delta = back;
            } else {
                delta = back
                    .iter()
                    .zip(cache.pre[l - 1].iter().zip(&cache.post[l - 1]))
                    .map(|(g, (&z, &a))| g * self.activation.derivative(z, a))
                    .collect();
            }
        }
        Ok((tape, delta))
    }

    pub fn to_checkpoint(&self) -> MlpCheckpoint {
        MlpCheckpoint {
            format_version: CHECKPOINT_VERSION,
            activation: self.activation,
            layer_sizes: self.sizes.to_vec(),
            weights: self.weights.iter().map(|w| w.data.clone()).collect(),
            biases: self.biases.to_vec(),
        }
    }

    pub fn from_checkpoint(c: &MlpCheckpoint) -> Result<Self, NdError> {
        if c.format_version != CHECKPOINT_VERSION {
            return Err(NdError::Checkpoint(format!("unsupported format version {}", c.format_version)));
        }
        if c.layer_sizes.len() != 4 || c.weights.len() != 3 || c.biases.len() != 3 {
            return Err(NdError::Checkpoint("expected exactly 3 weight layers".into()));
        }
        let s = &c.layer_sizes;
        let weights = [0, 1, 2].map(|l| Matrix::from_vec(s[l + 1], s[l], c.weights[l].clone()));
        let [w0, w1, w2] = weights;
        let biases = [c.biases[0].clone(), c.biases[1].clone(), c.biases[2].clone()];
        Self::from_parts([w0?, w1?, w2?], biases, c.activation)
    }
}

/// JSON checkpoint of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub format_version: u32,
    pub activation: Activation,
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Diagonal Gaussian with clamped log standard deviations.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianHead {
    pub mean: Vec<f64>,
    pub log_std: Vec<f64>,
    /// Whether each raw log-std was outside the clamp range (zero gradient).
    pub clamped: Vec<bool>,
}

impl GaussianHead {
    pub fn new(mean: Vec<f64>, raw_log_std: &[f64]) -> Self {
        assert_eq!(mean.len(), raw_log_std.len());
        let clamped = raw_log_std.iter().map(|&s| !(LOG_STD_MIN..=LOG_STD_MAX).contains(&s)).collect();
        let log_std = raw_log_std.iter().map(|&s| s.clamp(LOG_STD_MIN, LOG_STD_MAX)).collect();
        Self { mean, log_std, clamped }
    }

    /// Split a network output `[mean; raw_log_std]`.
    pub fn from_output(out: &[f64]) -> Self {
        let d = out.len() / 2;
        Self::new(out[..d].to_vec(), &out[d..2 * d])
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> Vec<f64> {
        self.log_std.iter().map(|s| s.exp()).collect()
    }
}

/// Independent Bernoulli coordinates parameterized by logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliHead {
    pub logits: Vec<f64>,
}

/// One categorical distribution parameterized by unnormalized logits.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalHead {
    pub logits: Vec<f64>,
}

/// Masked log-likelihood with gradients with respect to the head's raw
/// parameters.
pub trait Likelihood {
    fn log_likelihood(&self, x: &[f64], mask: &[bool]) -> Result<f64, NdError>;

    /// Gradient of the log-likelihood with respect to the raw network outputs
    /// that produced this head.
    fn log_likelihood_grad(&self, x: &[f64], mask: &[bool]) -> Result<Vec<f64>, NdError>;
}

impl Likelihood for GaussianHead {
    fn log_likelihood(&self, x: &[f64], mask: &[bool]) -> Result<f64, NdError> {
        check_len(self.dim(), x.len())?;
        check_len(self.dim(), mask.len())?;
        let mut ll = 0.0;
        for j in 0..self.dim() {
            if mask[j] {
                let s = self.log_std[j];
                let z = (x[j] - self.mean[j]) * (-s).exp();
                ll += -0.5 * LN_2PI - s - 0.5 * z * z;
            }
        }
        Ok(ll)
    }

    fn log_likelihood_grad(&self, x: &[f64], mask: &[bool]) -> Result<Vec<f64>, NdError> {
        check_len(self.dim(), x.len())?;
        check_len(self.dim(), mask.len())?;
        let d = self.dim();
        let mut g = vec![0.0; 2 * d];
        for j in 0..d {
            if mask[j] {
                let inv_var = (-2.0 * self.log_std[j]).exp();
                let r = x[j] - self.mean[j];
                g[j] = r * inv_var;
                if !self.clamped[j] {
                    g[d + j] = -1.0 + r * r * inv_var;
                }
            }
        }
        Ok(g)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Likelihood for BernoulliHead {
    fn log_likelihood(&self, x: &[f64], mask: &[bool]) -> Result<f64, NdError> {
        check_len(self.logits.len(), x.len())?;
        check_len(self.logits.len(), mask.len())?;
        Ok(self
            .logits
            .iter()
            .zip(x.iter().zip(mask))
            .filter(|(_, (_, &m))| m)
            .map(|(&l, (&x, _))| x * l - softplus(l))
            .sum())
    }

    fn log_likelihood_grad(&self, x: &[f64], mask: &[bool]) -> Result<Vec<f64>, NdError> {
        check_len(self.logits.len(), x.len())?;
        check_len(self.logits.len(), mask.len())?;
        Ok(self
            .logits
            .iter()
            .zip(x.iter().zip(mask))
            .map(|(&l, (&x, &m))| if m { x - sigmoid(l) } else { 0.0 })
            .collect())
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

impl CategoricalHead {
    pub fn probs(&self) -> Vec<f64> {
        log_softmax(&self.logits).into_iter().map(f64::exp).collect()
    }
}

impl Likelihood for CategoricalHead {
    /// `x` is a single category index; `mask` a single flag.
    fn log_likelihood(&self, x: &[f64], mask: &[bool]) -> Result<f64, NdError> {
        check_len(1, x.len())?;
        check_len(1, mask.len())?;
        if !mask[0] {
            return Ok(0.0);
        }
        let c = x[0] as usize;
        check_len(self.logits.len(), self.logits.len().max(c + 1))?;
        Ok(log_softmax(&self.logits)[c])
    }

    fn log_likelihood_grad(&self, x: &[f64], mask: &[bool]) -> Result<Vec<f64>, NdError> {
        check_len(1, x.len())?;
        check_len(1, mask.len())?;
        if !mask[0] {
            return Ok(vec![0.0; self.logits.len()]);
        }
        let c = x[0] as usize;
        let mut g: Vec<f64> = self.probs().into_iter().map(|p| -p).collect();
        g[c] += 1.0;
        Ok(g)
    }
}

/// `KL[q ‖ N(0, I)] = Σ ½(σ² + μ² − 1 − log σ²)`.
pub fn kl_diag_gaussian(q: &GaussianHead) -> f64 {
    q.mean
        .iter()
        .zip(&q.log_std)
        .map(|(&m, &s)| 0.5 * ((2.0 * s).exp() + m * m - 1.0 - 2.0 * s))
        .sum()
}

/// Gradient of the KL term with respect to `[mean; raw_log_std]`.
pub fn kl_diag_gaussian_grad(q: &GaussianHead) -> Vec<f64> {
    let d = q.dim();
    let mut g = vec![0.0; 2 * d];
    for j in 0..d {
        g[j] = q.mean[j];
        if !q.clamped[j] {
            g[d + j] = (2.0 * q.log_std[j]).exp() - 1.0;
        }
    }
    g
}

/// `z = μ + σ ⊙ ε` with `ε ~ N(0, I)`; returns `(z, ε)`.
pub fn reparameterize(q: &GaussianHead, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = (0..q.dim()).map(|_| rng::normal(rng)).collect();
    (reparameterize_with(q, &eps), eps)
}

pub fn reparameterize_with(q: &GaussianHead, eps: &[f64]) -> Vec<f64> {
    q.mean.iter().zip(&q.log_std).zip(eps).map(|((m, s), e)| m + s.exp() * e).collect()
}

/// Update rule applied to the (possibly noised) averaged gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<f64>,
    second: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        let (first, second) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Momentum { .. } => (vec![0.0; n_params], Vec::new()),
            OptimizerKind::Adam { .. } => (vec![0.0; n_params], vec![0.0; n_params]),
        };
        Self { kind, lr, step: 0, first, second }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Apply one update to `params` given gradient `grad` (same flat order).
    pub fn apply<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grad: &[f64]) {
        self.step += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Momentum { beta } => {
                for ((p, g), v) in params.zip(grad).zip(self.first.iter_mut()) {
                    *v = beta * *v + g;
                    *p -= lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.zip(grad).zip(self.first.iter_mut()).zip(self.second.iter_mut()) {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests;

//! Per-example clipping with Gaussian noise, and a Rényi-DP accountant for
//! the subsampled Gaussian mechanism.

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::rng::{self, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DpError {
    #[error("invalid privacy spec: {0}")]
    InvalidSpec(String),
    #[error("numerical overflow in RDP term (q={q}, sigma={sigma}, alpha={alpha})")]
    NumericalOverflow { q: f64, sigma: f64, alpha: u32 },
    #[error("target epsilon {0} is not reachable in the searched noise range")]
    Unreachable(f64),
}

/// Integer Rényi orders used by the accountant.
pub fn default_orders() -> Vec<u32> {
    (2..=64).chain([80, 128, 256, 512]).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrivacySpec {
    /// `f64::INFINITY` disables clipping; only valid with zero noise.
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub delta: f64,
    pub sampling_rate: f64,
}

impl PrivacySpec {
    pub fn new(clip_norm: f64, noise_multiplier: f64, delta: f64, sampling_rate: f64) -> Result<Self, DpError> {
        let spec = Self { clip_norm, noise_multiplier, delta, sampling_rate };
        spec.validate()?;
        Ok(spec)
    }

    /// Spec with δ = 1/n and q = batch/n.
    pub fn for_dataset(clip_norm: f64, noise_multiplier: f64, n: usize, batch: usize) -> Result<Self, DpError> {
        if n == 0 || batch == 0 {
            return Err(DpError::InvalidSpec("n and batch must be positive".into()));
        }
        Self::new(clip_norm, noise_multiplier, 1.0 / n as f64, (batch.min(n)) as f64 / n as f64)
    }

    /// No clipping and no noise.
    pub fn non_private(sampling_rate: f64) -> Self {
        Self { clip_norm: f64::INFINITY, noise_multiplier: 0.0, delta: 0.5, sampling_rate }
    }

    pub fn is_private(&self) -> bool {
        self.noise_multiplier > 0.0
    }

    pub fn validate(&self) -> Result<(), DpError> {
        let bad = |m: &str| Err(DpError::InvalidSpec(m.into()));
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip norm must be positive");
        }
        if self.clip_norm.is_infinite() && self.noise_multiplier != 0.0 {
            return bad("infinite clip norm is only allowed with zero noise");
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return bad("noise multiplier must be finite and nonnegative");
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad("delta must lie in (0, 1)");
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return bad("sampling rate must lie in (0, 1]");
        }
        Ok(())
    }
}

fn l2_norm(g: &[f64]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scale `g` by `min(1, C/‖g‖₂)`, the norm taken over all coordinates.
pub fn clip_gradient(g: &[f64], clip_norm: f64) -> Vec<f64> {
    let mut out = g.to_vec();
    clip_in_place(&mut out, clip_norm);
    out
}

/// In-place clip; returns the applied scale. Norms within a few ulps of
/// `C` are left alone so that clipping is idempotent.
pub fn clip_in_place(g: &mut [f64], clip_norm: f64) -> f64 {
    let norm = l2_norm(g);
    let scale = if norm > clip_norm * (1.0 + 8.0 * f64::EPSILON) { clip_norm / norm } else { 1.0 };
    if scale != 1.0 {
        g.iter_mut().for_each(|x| *x *= scale);
    }
    scale
}

/// Coordinate-wise pairwise sum of equally long vectors.
pub fn pairwise_vec_sum(vs: &[Vec<f64>]) -> Vec<f64> {
    match vs.len() {
        0 => Vec::new(),
        1 => vs[0].clone(),
        n => {
            let (a, b) = vs.split_at(n / 2);
            let mut left = pairwise_vec_sum(a);
            let right = pairwise_vec_sum(b);
            left.iter_mut().zip(&right).for_each(|(l, r)| *l += r);
            left
        }
    }
}

/// `(Σ clip(g_i, C) + N(0, σ²C²I)) / B` for one batch of per-example
/// gradients. No noise is drawn when σ = 0.
pub fn noisy_mean_gradient(per_example: &[Vec<f64>], spec: &PrivacySpec, rng: &mut Rng) -> Vec<f64> {
    let b = per_example.len();
    assert!(b > 0, "empty batch");
    let clipped: Vec<Vec<f64>> = if spec.clip_norm.is_finite() {
        crate::par::map_slice(per_example, |g| clip_gradient(g, spec.clip_norm))
    } else {
        per_example.to_vec()
    };
    let mut sum = pairwise_vec_sum(&clipped);
    if spec.noise_multiplier > 0.0 {
        let std = spec.noise_multiplier * spec.clip_norm;
        sum.iter_mut().for_each(|x| *x += std * rng::normal(rng));
    }
    let inv = b as f64;
    sum.iter_mut().for_each(|x| *x /= inv);
    sum
}

/// One DP-SGD update `θ ← θ − lr · noisy_mean_gradient`.
pub fn dp_step<'a>(
    params: impl Iterator<Item = &'a mut f64>,
    per_example: &[Vec<f64>],
    spec: &PrivacySpec,
    lr: f64,
    rng: &mut Rng,
) {
    let g = noisy_mean_gradient(per_example, spec, rng);
    for (p, g) in params.zip(&g) {
        *p -= lr * g;
    }
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Per-step RDP of the Poisson-subsampled Gaussian mechanism at integer
/// order `alpha`.
pub fn rdp_subsampled_gaussian(q: f64, sigma: f64, alpha: u32) -> Result<f64, DpError> {
    assert!(alpha >= 2, "order must be at least 2");
    if q == 0.0 {
        return Ok(0.0);
    }
    if sigma == 0.0 {
        return Ok(f64::INFINITY);
    }
    let a = alpha as f64;
    let (log_q, log_1q) = (q.ln(), (1.0 - q).ln());
    let mut log_binom = 0.0;
    let mut acc = f64::NEG_INFINITY;
    for j in 0..=alpha {
        let jf = j as f64;
        if j > 0 {
            log_binom += (a - jf + 1.0).ln() - jf.ln();
        }
        let log_1q_term = if j == alpha { 0.0 } else { (a - jf) * log_1q };
        let log_q_term = if j == 0 { 0.0 } else { jf * log_q };
        let term = log_binom + log_1q_term + log_q_term + jf * (jf - 1.0) / (2.0 * sigma * sigma);
        acc = log_add(acc, term);
    }
    let v = acc / (a - 1.0);
    if !v.is_finite() {
        return Err(DpError::NumericalOverflow { q, sigma, alpha });
    }
    Ok(v.max(0.0))
}

/// Cumulative RDP ledger for `steps` steps of a mechanism.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyAccount {
    pub spec: PrivacySpec,
    pub steps: u64,
    pub rdp_orders: Vec<u32>,
    pub rdp_values: Vec<f64>,
    pub epsilon: f64,
    pub best_order: Option<u32>,
}

/// `min_α [rdp(α) + log(1/δ)/(α−1)]`, ties toward the smallest order. An
/// all-zero ledger (no steps, or a data-independent mechanism) gives ε = 0.
pub fn epsilon_from_rdp(orders: &[u32], rdp: &[f64], delta: f64) -> (f64, Option<u32>) {
    if rdp.iter().all(|&r| r == 0.0) {
        return (0.0, None);
    }
    let mut best = (f64::INFINITY, None);
    for (&a, &r) in orders.iter().zip(rdp) {
        let e = r + (1.0 / delta).ln() / (a as f64 - 1.0);
        if e < best.0 {
            best = (e, Some(a));
        }
    }
    best
}

impl PrivacyAccount {
    /// Sum the RDP ledgers of two accounts over the same orders and δ.
    pub fn compose(&self, other: &PrivacyAccount) -> PrivacyAccount {
        assert_eq!(self.rdp_orders, other.rdp_orders, "order grids differ");
        let rdp_values: Vec<f64> = self.rdp_values.iter().zip(&other.rdp_values).map(|(a, b)| a + b).collect();
        let (epsilon, best_order) = epsilon_from_rdp(&self.rdp_orders, &rdp_values, self.spec.delta);
        PrivacyAccount {
            spec: self.spec,
            steps: self.steps + other.steps,
            rdp_orders: self.rdp_orders.clone(),
            rdp_values,
            epsilon,
            best_order,
        }
    }

    pub fn to_ledger_json(&self) -> serde_json::Value {
        json!({
            "C": if self.spec.clip_norm.is_finite() { json!(self.spec.clip_norm) } else { json!(null) },
            "sigma": self.spec.noise_multiplier,
            "q": self.spec.sampling_rate,
            "T": self.steps,
            "delta": self.spec.delta,
            "orders": self.rdp_orders,
            "rdp": self.rdp_values.iter().map(|v| if v.is_finite() { json!(v) } else { json!(null) }).collect::<Vec<_>>(),
            "epsilon": if self.epsilon.is_finite() { json!(self.epsilon) } else { json!(null) },
            "sampling_assumption": "poisson-approx",
        })
    }
}

/// RDP ledger after `steps` steps. Orders whose per-step term overflows are
/// recorded as infinite and never selected.
pub fn account(spec: &PrivacySpec, steps: u64) -> PrivacyAccount {
    let orders = default_orders();
    let rdp_values: Vec<f64> = orders
        .iter()
        .map(|&a| {
            if steps == 0 {
                return 0.0;
            }
            rdp_subsampled_gaussian(spec.sampling_rate, spec.noise_multiplier, a)
                .map(|r| r * steps as f64)
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let (epsilon, best_order) = epsilon_from_rdp(&orders, &rdp_values, spec.delta);
    PrivacyAccount { spec: *spec, steps, rdp_orders: orders, rdp_values, epsilon, best_order }
}

pub const SIGMA_SEARCH_RANGE: (f64, f64) = (0.05, 500.0);

/// Smallest-error σ (within `tol`) such that `account` reaches `target_eps`.
/// Returns the upper end of the final bracket, so the achieved ε is at most
/// the target.
pub fn calibrate_sigma(q: f64, steps: u64, delta: f64, target_eps: f64, tol: f64) -> Result<f64, DpError> {
    let eps_at = |sigma: f64| account(&PrivacySpec { clip_norm: 1.0, noise_multiplier: sigma, delta, sampling_rate: q }, steps).epsilon;
    let (mut lo, mut hi) = SIGMA_SEARCH_RANGE;
    if eps_at(hi) > target_eps {
        return Err(DpError::Unreachable(target_eps));
    }
    if eps_at(lo) <= target_eps {
        return Ok(lo);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid) > target_eps {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityBound {
    pub delta_h: f64,
    pub norm: Norm,
}

/// One Laplace(0, b) draw by inversion.
pub fn laplace(rng: &mut Rng, b: f64) -> f64 {
    let u = rng::uniform(rng) - 0.5;
    -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Add i.i.d. Laplace(ΔH/ε) noise to every coordinate.
pub fn laplace_output_perturb(value: &[f64], bound: SensitivityBound, eps: f64, rng: &mut Rng) -> Vec<f64> {
    assert!(eps > 0.0 && bound.delta_h.is_finite() && bound.delta_h >= 0.0);
    if bound.delta_h == 0.0 {
        return value.to_vec();
    }
    let b = bound.delta_h / eps;
    value.iter().map(|v| v + laplace(rng, b)).collect()
}

#[cfg(test)]
mod tests;

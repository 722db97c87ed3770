//! Convex ERM laboratory: how far can one added record move a causal versus
//! an associational linear model, and what does that imply for output
//! perturbation budgets.
//!
//! The per-point loss carries the regularizer, `L_x(θ) = ℓ(θ; x, y) + λ/2 ‖θ‖²`,
//! and the training objective is its mean, so `λ` is the strong-convexity
//! modulus. The squared loss is `ℓ = ½ (y − θᵀx)²`.

use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clf::cholesky_solve;
use crate::genmodel::Mode;
use crate::par;
use crate::rng::{self, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("invalid problem: {0}")]
    Problem(String),
    #[error("solver stopped with gradient norm {grad_norm:e} after {iters} iterations")]
    NonConvergence { grad_norm: f64, iters: usize },
}

/// Optimality tolerance on the gradient norm of the training objective.
pub const GRAD_TOL: f64 = 1e-8;
const MAX_NEWTON: usize = 100;
/// Box vertices are enumerated up to this many features.
pub const VERTEX_LIMIT: usize = 10;
const GRID_PER_AXIS: usize = 50;
const GRID_BUDGET: usize = 2500;
const ADVERSARY_STARTS: usize = 8;
const ADVERSARY_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearNode {
    pub name: String,
    #[serde(default)]
    pub parents: Vec<(String, f64)>,
    #[serde(default)]
    pub bias: f64,
    /// Noise is uniform on `[−noise_bound, noise_bound]`.
    pub noise_bound: f64,
}

/// Linear structural model with bounded additive noise,
/// `x_i = bias_i + Σ w_ij x_j + η_i`. Variables are listed in topological
/// order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearScg {
    pub variables: Vec<LinearNode>,
}

impl LinearScg {
    pub fn new(variables: Vec<LinearNode>) -> Result<Self, TheoryError> {
        for (i, v) in variables.iter().enumerate() {
            if variables[..i].iter().any(|u| u.name == v.name) {
                return Err(TheoryError::Graph(format!("duplicate variable {}", v.name)));
            }
            if !(v.noise_bound.is_finite() && v.noise_bound >= 0.0 && v.bias.is_finite()) {
                return Err(TheoryError::Graph(format!("{}: noise bound and bias must be finite, bound ≥ 0", v.name)));
            }
            for (p, w) in &v.parents {
                if !w.is_finite() {
                    return Err(TheoryError::Graph(format!("{}: non-finite weight on {p}", v.name)));
                }
                if !variables[..i].iter().any(|u| &u.name == p) {
                    return Err(TheoryError::Graph(format!("{}: parent {p} must be listed earlier", v.name)));
                }
            }
        }
        Ok(Self { variables })
    }

    pub fn from_json(text: &str) -> Result<Self, TheoryError> {
        let raw: LinearScg = serde_json::from_str(text).map_err(|e| TheoryError::Graph(e.to_string()))?;
        Self::new(raw.variables)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    fn parent_indices(&self, i: usize) -> Vec<(usize, f64)> {
        self.variables[i].parents.iter().map(|(p, w)| (self.index_of(p).expect("validated"), *w)).collect()
    }

    /// Interval bounds of every variable.
    pub fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b: Vec<(f64, f64)> = Vec::with_capacity(self.variables.len());
        for (i, v) in self.variables.iter().enumerate() {
            let (mut lo, mut hi) = (v.bias - v.noise_bound, v.bias + v.noise_bound);
            for (p, w) in self.parent_indices(i) {
                let (a, c) = (w * b[p].0, w * b[p].1);
                lo += a.min(c);
                hi += a.max(c);
            }
            b.push((lo, hi));
        }
        b
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
        let parents: Vec<Vec<(usize, f64)>> = (0..self.variables.len()).map(|i| self.parent_indices(i)).collect();
        (0..n)
            .map(|_| {
                let mut row = vec![0.0; self.variables.len()];
                for (i, v) in self.variables.iter().enumerate() {
                    let eta = v.noise_bound * (2.0 * rng::uniform(rng) - 1.0);
                    row[i] = v.bias + eta + parents[i].iter().map(|&(p, w)| w * row[p]).sum::<f64>();
                }
                row
            })
            .collect()
    }

    /// `x1 → y → x2` where `x2` tracks `y` with weight `strength`: predicting
    /// `y`, `x1` is causal and `x2` is a spurious associational feature.
    pub fn spurious(strength: f64) -> Self {
        let node = |name: &str, parents: Vec<(String, f64)>, noise_bound| LinearNode { name: name.into(), parents, bias: 0.0, noise_bound };
        Self::new(vec![
            node("x1", vec![], 1.0),
            node("y", vec![("x1".into(), 1.0)], 0.5),
            node("x2", vec![("y".into(), strength)], 0.1),
        ])
        .expect("valid graph")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Squared,
    Logistic,
}

impl FromStr for Loss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "squared" | "ridge" => Ok(Loss::Squared),
            "logistic" => Ok(Loss::Logistic),
            _ => Err(format!("unknown loss {s:?} (expected squared or logistic)")),
        }
    }
}

/// Predicting one variable of a [`LinearScg`] from all the others over the
/// graph's bounded domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmProblem {
    pub graph: LinearScg,
    pub target: usize,
    /// Graph indices of the features, in feature order.
    pub features: Vec<usize>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// Feature positions of the target's parents.
    pub causal: Vec<usize>,
    pub associational: Vec<usize>,
    pub loss: Loss,
    pub lambda: f64,
    /// Oracle `f*` as weights over features (zero off the parents) plus bias.
    pub f_star: Vec<f64>,
    pub f_star_bias: f64,
    pub eta_bound: f64,
    pub rho: f64,
}

impl ErmProblem {
    /// `eta_bound` overrides the target's noise bound.
    pub fn from_scg(graph: &LinearScg, target: &str, loss: Loss, lambda: f64, eta_bound: Option<f64>) -> Result<Self, TheoryError> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(TheoryError::Problem("lambda must be positive".into()));
        }
        let t = graph.index_of(target).ok_or_else(|| TheoryError::Problem(format!("unknown target {target}")))?;
        let mut graph = graph.clone();
        if let Some(b) = eta_bound {
            if !(b.is_finite() && b >= 0.0) {
                return Err(TheoryError::Problem("eta bound must be finite and nonnegative".into()));
            }
            graph.variables[t].noise_bound = b;
        }
        let features: Vec<usize> = (0..graph.variables.len()).filter(|&i| i != t).collect();
        if features.is_empty() {
            return Err(TheoryError::Problem("no features besides the target".into()));
        }
        let bounds = graph.bounds();
        let parents = graph.parent_indices(t);
        let mut f_star = vec![0.0; features.len()];
        let mut causal = Vec::new();
        for (pos, &g) in features.iter().enumerate() {
            if let Some(&(_, w)) = parents.iter().find(|(p, _)| *p == g) {
                f_star[pos] = w;
                causal.push(pos);
            }
        }
        let associational = (0..features.len()).filter(|j| !causal.contains(j)).collect();
        let lo: Vec<f64> = features.iter().map(|&g| bounds[g].0).collect();
        let hi: Vec<f64> = features.iter().map(|&g| bounds[g].1).collect();
        let x_norm = lo.iter().zip(&hi).map(|(a, b)| a.abs().max(b.abs()).powi(2)).sum::<f64>().sqrt();
        let rho = match loss {
            Loss::Squared => {
                let y_max = bounds[t].0.abs().max(bounds[t].1.abs());
                // J(θ̂) ≤ J(0) ≤ ½ y_max² bounds ‖θ̂‖.
                let theta_max = y_max / lambda.sqrt();
                let residual = y_max + theta_max * x_norm;
                residual * x_norm + lambda * theta_max
            }
            Loss::Logistic => {
                let theta_max = (2.0 * std::f64::consts::LN_2 / lambda).sqrt();
                x_norm + lambda * theta_max
            }
        };
        let eta_bound = graph.variables[t].noise_bound;
        let f_star_bias = graph.variables[t].bias;
        Ok(Self { graph, target: t, features, lo, hi, causal, associational, loss, lambda, f_star, f_star_bias, eta_bound, rho })
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn active(&self, mode: Mode) -> Vec<usize> {
        match mode {
            Mode::Causal => self.causal.clone(),
            Mode::Associational => (0..self.dim()).collect(),
        }
    }

    /// `n + 1 > 2ρ/λ`.
    pub fn n_condition(&self, n: usize) -> bool {
        (n + 1) as f64 > 2.0 * self.rho / self.lambda
    }

    pub fn oracle(&self, x: &[f64]) -> f64 {
        self.f_star_bias + dot(&self.f_star, x)
    }

    fn label(&self, value: f64) -> f64 {
        match self.loss {
            Loss::Squared => value,
            Loss::Logistic => {
                if value > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
        }
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> ErmData {
        let rows = self.graph.sample(n, rng);
        ErmData {
            x: rows.iter().map(|r| self.features.iter().map(|&g| r[g]).collect()).collect(),
            y: rows.iter().map(|r| self.label(r[self.target])).collect(),
        }
    }

    /// `ℓ(θ; x, y)` without the regularizer.
    pub fn data_loss(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        let m = dot(theta, x);
        match self.loss {
            Loss::Squared => 0.5 * (y - m).powi(2),
            Loss::Logistic => softplus(-y * m),
        }
    }

    /// `L_x(θ) = ℓ(θ; x, y) + λ/2 ‖θ‖²`.
    pub fn point_loss(&self, theta: &[f64], x: &[f64], y: f64) -> f64 {
        self.data_loss(theta, x, y) + 0.5 * self.lambda * dot(theta, theta)
    }

    /// Targets the graph can produce at `x` with extreme noise: both ends of
    /// the noise interval for the squared loss, the reachable labels for the
    /// logistic loss.
    fn reachable_targets(&self, x: &[f64]) -> Vec<f64> {
        let f = self.oracle(x);
        let b = self.eta_bound;
        match self.loss {
            Loss::Squared => vec![f - b, f + b],
            Loss::Logistic => {
                let mut out = Vec::new();
                if f + b > 0.0 {
                    out.push(1.0);
                }
                if f - b <= 0.0 {
                    out.push(-1.0);
                }
                out
            }
        }
    }

    /// Largest data loss over the targets reachable at `x`.
    fn worst_target(&self, theta: &[f64], x: &[f64]) -> (f64, f64) {
        self.reachable_targets(x)
            .into_iter()
            .map(|y| (y, self.data_loss(theta, x, y)))
            .fold((f64::NAN, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best })
    }

    fn vertices(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..1usize << d).map(|mask| (0..d).map(|j| if mask >> j & 1 == 1 { self.hi[j] } else { self.lo[j] }).collect()).collect()
    }

    fn project(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            *v = v.clamp(self.lo[j], self.hi[j]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmData {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl ErmData {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn with_point(&self, x: &[f64], y: f64) -> Self {
        let mut out = self.clone();
        out.x.push(x.to_vec());
        out.y.push(y);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmSolution {
    /// Full-length parameters; structurally zero off the active set.
    pub theta: Vec<f64>,
    pub mode: Mode,
    /// Regularized training objective at `theta`.
    pub training_loss: f64,
    pub grad_norm: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Objective, gradient and Hessian over the active coordinates.
fn objective(problem: &ErmProblem, data: &ErmData, active: &[usize], th: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let d = active.len();
    let n = data.len() as f64;
    let lam = problem.lambda;
    let mut f = 0.5 * lam * dot(th, th) * n;
    let mut g: Vec<f64> = th.iter().map(|t| lam * t * n).collect();
    let mut h = vec![0.0; d * d];
    for i in 0..d {
        h[i * d + i] = lam * n;
    }
    let mut xa = vec![0.0; d];
    for (row, &y) in data.x.iter().zip(&data.y) {
        for (k, &j) in active.iter().enumerate() {
            xa[k] = row[j];
        }
        let m = dot(th, &xa);
        let (loss, dl, curv) = match problem.loss {
            Loss::Squared => (0.5 * (y - m).powi(2), m - y, 1.0),
            Loss::Logistic => {
                let p = crate::ndcore::sigmoid(-y * m);
                (softplus(-y * m), -y * p, p * (1.0 - p))
            }
        };
        f += loss;
        for a in 0..d {
            g[a] += dl * xa[a];
            for b in 0..=a {
                h[a * d + b] += curv * xa[a] * xa[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            h[b * d + a] = h[a * d + b];
        }
    }
    (f / n, g.into_iter().map(|v| v / n).collect(), h.into_iter().map(|v| v / n).collect())
}

/// Global optimum of the regularized objective by Newton's method,
/// restricted to the causal features in causal mode.
pub fn solve_erm(problem: &ErmProblem, data: &ErmData, mode: Mode) -> Result<ErmSolution, TheoryError> {
    if data.is_empty() {
        return Err(TheoryError::Problem("empty dataset".into()));
    }
    let active = problem.active(mode);
    let d = active.len();
    let mut th = vec![0.0; d];
    let (mut f, mut g, mut h) = objective(problem, data, &active, &th);
    let mut iters = 0;
    while iters < MAX_NEWTON && norm(&g) > 1e-13 {
        iters += 1;
        let step = cholesky_solve(&h, &g, d);
        let decrement = dot(&step, &g);
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = th.iter().zip(&step).map(|(p, s)| p - t * s).collect();
            let (fc, gc, hc) = objective(problem, data, &active, &cand);
            if fc <= f - 1e-4 * t * decrement || t < 1e-10 {
                (th, f, g, h) = (cand, fc, gc, hc);
                break;
            }
            t *= 0.5;
        }
    }
    let grad_norm = norm(&g);
    if !(grad_norm <= GRAD_TOL) {
        return Err(TheoryError::NonConvergence { grad_norm, iters });
    }
    let mut theta = vec![0.0; problem.dim()];
    for (k, &j) in active.iter().enumerate() {
        theta[j] = th[k];
    }
    Ok(ErmSolution { theta, mode, training_loss: f, grad_norm })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryPoint {
    pub x: Vec<f64>,
    pub y: f64,
    /// Data loss at the point, without the regularizer.
    pub loss: f64,
}

/// Loss-maximizing point over the feature box, with the target constrained
/// to what the graph can generate at that point.
pub fn lm_adversary(solution: &ErmSolution, problem: &ErmProblem) -> AdversaryPoint {
    let theta = &solution.theta;
    let value = |x: &[f64]| problem.worst_target(theta, x);
    let mut best = AdversaryPoint { x: Vec::new(), y: f64::NAN, loss: f64::NEG_INFINITY };
    let consider = |x: Vec<f64>, best: &mut AdversaryPoint| {
        let (y, loss) = value(&x);
        if loss > best.loss {
            *best = AdversaryPoint { x, y, loss };
        }
    };
    if problem.dim() <= VERTEX_LIMIT {
        for v in problem.vertices() {
            consider(v, &mut best);
        }
    } else {
        // Both sign patterns of the residual direction.
        let c: Vec<f64> = problem.f_star.iter().zip(theta).map(|(a, b)| a - b).collect();
        for s in [1.0, -1.0] {
            let v = (0..problem.dim()).map(|j| if s * c[j] >= 0.0 { problem.hi[j] } else { problem.lo[j] }).collect();
            consider(v, &mut best);
        }
    }
    // Multi-start projected ascent from fixed interior starts.
    let mut r = rng::from_seed(rng::derive(0, "adversary-starts"));
    let width: Vec<f64> = problem.lo.iter().zip(&problem.hi).map(|(a, b)| b - a).collect();
    for _ in 0..ADVERSARY_STARTS {
        let mut x: Vec<f64> = (0..problem.dim()).map(|j| problem.lo[j] + width[j] * rng::uniform(&mut r)).collect();
        for _ in 0..ADVERSARY_STEPS {
            let base = value(&x).1;
            let mut grad = vec![0.0; x.len()];
            for j in 0..x.len() {
                let h = 1e-6 * width[j].max(1e-12);
                let mut xp = x.clone();
                xp[j] += h;
                grad[j] = (value(&xp).1 - base) / h;
            }
            for j in 0..x.len() {
                x[j] += 0.05 * width[j] * grad[j].signum();
            }
            problem.project(&mut x);
        }
        consider(x, &mut best);
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityEstimate {
    pub mode: Mode,
    /// Running maximum of ‖θ − θ′‖₂ over the probed neighbours.
    pub max_delta: f64,
    pub argmax_x: Vec<f64>,
    pub argmax_y: f64,
    pub trials: usize,
    pub history: Vec<f64>,
    /// Worst data loss found by the adversary against the fitted model.
    pub adversary_loss: f64,
    /// Largest `‖θ − θ′‖ / √(2 (L_x′(θ) − L_x′(θ′)) / (λ(n+1)))`.
    pub max_bound_ratio: f64,
}

/// Probe neighbours `D ∪ {x′}`: the adversary's point, every box vertex at
/// both noise extremes, then `trials` random points.
pub fn measure_sensitivity(
    problem: &ErmProblem,
    data: &ErmData,
    mode: Mode,
    trials: usize,
    rng: &mut Rng,
) -> Result<SensitivityEstimate, TheoryError> {
    if trials == 0 {
        return Err(TheoryError::Problem("trials must be at least 1".into()));
    }
    let sol = solve_erm(problem, data, mode)?;
    let adv = lm_adversary(&sol, problem);
    let mut candidates = vec![(adv.x.clone(), adv.y)];
    if problem.dim() <= VERTEX_LIMIT {
        for v in problem.vertices() {
            for y in problem.reachable_targets(&v) {
                candidates.push((v.clone(), y));
            }
        }
    }
    for _ in 0..trials {
        let x: Vec<f64> = (0..problem.dim()).map(|j| problem.lo[j] + (problem.hi[j] - problem.lo[j]) * rng::uniform(rng)).collect();
        let eta = problem.eta_bound * (2.0 * rng::uniform(rng) - 1.0);
        let y = problem.label(problem.oracle(&x) + eta);
        candidates.push((x, y));
    }
    let n = data.len();
    let results = par::try_map_range(candidates.len(), |c| -> Result<(f64, f64), TheoryError> {
        let (x, y) = &candidates[c];
        let other = solve_erm(problem, &data.with_point(x, *y), mode)?;
        let delta = norm(&sol.theta.iter().zip(&other.theta).map(|(a, b)| a - b).collect::<Vec<_>>());
        let gap = problem.point_loss(&sol.theta, x, *y) - problem.point_loss(&other.theta, x, *y);
        let bound = (2.0 * gap.max(0.0) / (problem.lambda * (n + 1) as f64)).sqrt();
        let ratio = if delta == 0.0 { 0.0 } else { delta / bound };
        Ok((delta, ratio))
    })?;
    let mut history = Vec::with_capacity(results.len());
    let (mut max_delta, mut arg, mut max_ratio) = (0.0f64, 0usize, 0.0f64);
    for (c, &(delta, ratio)) in results.iter().enumerate() {
        if delta > max_delta {
            max_delta = delta;
            arg = c;
        }
        max_ratio = max_ratio.max(ratio);
        history.push(max_delta);
    }
    Ok(SensitivityEstimate {
        mode,
        max_delta,
        argmax_x: candidates[arg].0.clone(),
        argmax_y: candidates[arg].1,
        trials: candidates.len(),
        history,
        adversary_loss: adv.loss,
        max_bound_ratio: max_ratio,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assumption1Check {
    pub holds: bool,
    /// `max_{x_c} L(θ_c) − L(θ_a)` at the witness `x_a`.
    pub lhs: f64,
    /// `min_{x_c} max_{x_a″} L(θ_a; x_a″) − L(θ_a; x_a)` at the witness.
    pub rhs: f64,
    pub witness: Vec<f64>,
}

fn grid(problem: &ErmProblem, dims: &[usize]) -> Vec<Vec<f64>> {
    let per_axis = if dims.is_empty() {
        1
    } else {
        let fit = (GRID_BUDGET as f64).powf(1.0 / dims.len() as f64).floor() as usize;
        fit.clamp(2, GRID_PER_AXIS)
    };
    let mut out = vec![Vec::new()];
    for &j in dims {
        let mut next = Vec::with_capacity(out.len() * per_axis);
        for p in &out {
            for s in 0..per_axis {
                let t = s as f64 / (per_axis - 1).max(1) as f64;
                let mut q = p.clone();
                q.push(problem.lo[j] + t * (problem.hi[j] - problem.lo[j]));
                next.push(q);
            }
        }
        out = next;
    }
    out
}

/// Grid evaluation of the non-trivial-contribution condition. Losses are
/// per-point losses against the noise-free oracle target.
pub fn assumption1(problem: &ErmProblem, causal: &ErmSolution, assoc: &ErmSolution) -> Assumption1Check {
    let gc = grid(problem, &problem.causal);
    let ga = grid(problem, &problem.associational);
    let point = |c: &[f64], a: &[f64]| {
        let mut x = vec![0.0; problem.dim()];
        for (k, &j) in problem.causal.iter().enumerate() {
            x[j] = c[k];
        }
        for (k, &j) in problem.associational.iter().enumerate() {
            x[j] = a[k];
        }
        x
    };
    let loss = |theta: &[f64], x: &[f64]| problem.point_loss(theta, x, problem.label(problem.oracle(x)));
    let la: Vec<Vec<f64>> = gc.iter().map(|c| ga.iter().map(|a| loss(&assoc.theta, &point(c, a))).collect()).collect();
    let lc: Vec<f64> = gc.iter().map(|c| loss(&causal.theta, &point(c, &ga[0]))).collect();
    let top: Vec<f64> = la.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect();
    let mut best: Option<Assumption1Check> = None;
    for (ai, a) in ga.iter().enumerate() {
        let lhs = (0..gc.len()).map(|ci| lc[ci] - la[ci][ai]).fold(f64::NEG_INFINITY, f64::max);
        let rhs = (0..gc.len()).map(|ci| top[ci] - la[ci][ai]).fold(f64::INFINITY, f64::min);
        let margin = rhs - lhs;
        if best.as_ref().is_none_or(|b| margin > b.rhs - b.lhs) {
            best = Some(Assumption1Check { holds: lhs <= rhs, lhs, rhs, witness: a.clone() });
        }
    }
    best.expect("grid is nonempty")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    /// Laplace scale `b`; budgets are `ε = Δ/b`.
    pub laplace_scale: f64,
    /// Random probes per sensitivity estimate.
    pub probes: usize,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self { laplace_scale: 0.01, probes: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub seed: u64,
    pub n: usize,
    pub delta_c: f64,
    pub delta_a: f64,
    pub eps_c: f64,
    pub eps_a: f64,
    /// Budgets from the ℓ1 bound `Δ₁ ≤ √dim · Δ₂`.
    pub eps_l1_c: f64,
    pub eps_l1_a: f64,
    pub worst_loss_c: f64,
    pub worst_loss_a: f64,
    pub assumption1_holds: bool,
    pub n_condition_holds: bool,
    /// The strong-convexity bound held for every probe.
    pub bound_holds: bool,
    /// Associational training loss ≤ causal training loss.
    pub nested_holds: bool,
}

impl TrialRecord {
    pub fn conditions_hold(&self) -> bool {
        self.assumption1_holds && self.n_condition_holds
    }

    pub fn causal_le_assoc(&self) -> bool {
        self.eps_c <= self.eps_a
    }
}

/// One seeded replication: sample `n` records, measure both sensitivities
/// with shared probes, and convert them to output-perturbation budgets.
pub fn theorem_trial(problem: &ErmProblem, n: usize, cfg: &TrialConfig, trial: usize, seed: u64) -> Result<TrialRecord, TheoryError> {
    if n < 2 {
        return Err(TheoryError::Problem("n must be at least 2".into()));
    }
    if !(cfg.laplace_scale.is_finite() && cfg.laplace_scale > 0.0) {
        return Err(TheoryError::Problem("laplace scale must be positive".into()));
    }
    let data = problem.sample(n, &mut rng::from_seed(rng::derive(seed, "data")));
    let probe_seed = rng::derive(seed, "probes");
    let sc = measure_sensitivity(problem, &data, Mode::Causal, cfg.probes.max(1), &mut rng::from_seed(probe_seed))?;
    let sa = measure_sensitivity(problem, &data, Mode::Associational, cfg.probes.max(1), &mut rng::from_seed(probe_seed))?;
    let causal = solve_erm(problem, &data, Mode::Causal)?;
    let assoc = solve_erm(problem, &data, Mode::Associational)?;
    let a1 = assumption1(problem, &causal, &assoc);
    let b = cfg.laplace_scale;
    let dims = |m: Mode| (problem.active(m).len() as f64).sqrt();
    Ok(TrialRecord {
        trial,
        seed,
        n,
        delta_c: sc.max_delta,
        delta_a: sa.max_delta,
        eps_c: sc.max_delta / b,
        eps_a: sa.max_delta / b,
        eps_l1_c: dims(Mode::Causal) * sc.max_delta / b,
        eps_l1_a: dims(Mode::Associational) * sa.max_delta / b,
        worst_loss_c: sc.adversary_loss,
        worst_loss_a: sa.adversary_loss,
        assumption1_holds: a1.holds,
        n_condition_holds: problem.n_condition(n),
        bound_holds: sc.max_bound_ratio <= 1.0 + 1e-6 && sa.max_bound_ratio <= 1.0 + 1e-6,
        nested_holds: assoc.training_loss <= causal.training_loss + 1e-10,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stratum {
    pub name: String,
    pub trials: usize,
    pub causal_le_assoc: usize,
    pub fraction: f64,
    /// Trials where the causal worst-case loss exceeded the associational one.
    pub worst_loss_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub target: String,
    pub loss: Loss,
    pub lambda: f64,
    pub rho: f64,
    pub eta_bound: f64,
    pub n: usize,
    pub laplace_scale: f64,
    pub records: Vec<TrialRecord>,
    /// `conditions-hold` first, then `conditions-violated`.
    pub strata: Vec<Stratum>,
}

impl TheoryReport {
    pub fn stratum(&self, name: &str) -> Option<&Stratum> {
        self.strata.iter().find(|s| s.name == name)
    }

    pub fn records_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
    }
}

/// Independent trials over derived seeds, stratified by whether both
/// preconditions held.
pub fn run_theory(problem: &ErmProblem, n: usize, trials: usize, cfg: &TrialConfig, seed: u64) -> Result<TheoryReport, TheoryError> {
    let records = par::try_map_range(trials, |t| theorem_trial(problem, n, cfg, t, rng::derive_indexed(seed, "trial", t as u64)))?;
    let strata = [("conditions-hold", true), ("conditions-violated", false)]
        .into_iter()
        .map(|(name, want)| {
            let rs: Vec<&TrialRecord> = records.iter().filter(|r| r.conditions_hold() == want).collect();
            let ok = rs.iter().filter(|r| r.causal_le_assoc()).count();
            Stratum {
                name: name.into(),
                trials: rs.len(),
                causal_le_assoc: ok,
                fraction: if rs.is_empty() { 0.0 } else { ok as f64 / rs.len() as f64 },
                worst_loss_violations: rs.iter().filter(|r| r.worst_loss_c > r.worst_loss_a).count(),
            }
        })
        .collect();
    Ok(TheoryReport {
        target: problem.graph.variables[problem.target].name.clone(),
        loss: problem.loss,
        lambda: problem.lambda,
        rho: problem.rho,
        eta_bound: problem.eta_bound,
        n,
        laplace_scale: cfg.laplace_scale,
        records,
        strata,
    })
}

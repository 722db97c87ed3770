//! Classifiers used by the attack and utility harnesses: logistic
//! regression, linear and RBF-kernel SVMs, random forest and k-nearest
//! neighbours.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClfError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot fit on an empty dataset")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    LinearSvm,
    KernelSvm,
    Logistic,
    RandomForest,
    Knn,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 5] = [
        ClassifierKind::LinearSvm,
        ClassifierKind::KernelSvm,
        ClassifierKind::Logistic,
        ClassifierKind::RandomForest,
        ClassifierKind::Knn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ClassifierKind::LinearSvm => "linear-svm",
            ClassifierKind::KernelSvm => "kernel-svm",
            ClassifierKind::Logistic => "logistic",
            ClassifierKind::RandomForest => "random-forest",
            ClassifierKind::Knn => "knn",
        }
    }

    /// Short label used in report tables.
    pub fn short_name(self) -> &'static str {
        match self {
            ClassifierKind::LinearSvm => "LinearSVC",
            ClassifierKind::KernelSvm => "SVC",
            ClassifierKind::Logistic => "LR",
            ClassifierKind::RandomForest => "RF",
            ClassifierKind::Knn => "KNN",
        }
    }
}

impl std::fmt::Display for ClassifierKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ClassifierKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ClassifierKind::ALL
            .into_iter()
            .find(|k| k.name() == s || k.short_name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown classifier {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub l2: f64,
    pub max_iters: usize,
    pub svm_c: f64,
    /// RBF width; `None` means `1/k`.
    pub gamma: Option<f64>,
    pub n_trees: usize,
    pub max_depth: usize,
    pub bootstrap: bool,
    /// Features tried per split; `None` means `⌈√k⌉`.
    pub max_features: Option<usize>,
    pub k: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            max_iters: 200,
            svm_c: 1.0,
            gamma: None,
            n_trees: 100,
            max_depth: 16,
            bootstrap: true,
            max_features: None,
            k: 5,
        }
    }
}

/// Per-column standardization fitted on training features.
#[derive(Debug, Clone, PartialEq)]
struct Scaler {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Scaler {
    /// Column sums run over sorted values so the result does not depend on
    /// row order.
    fn fit(x: &[Vec<f64>]) -> Self {
        let k = x[0].len();
        let n = x.len() as f64;
        let mut mean = Vec::with_capacity(k);
        let mut std = Vec::with_capacity(k);
        for j in 0..k {
            let mut col: Vec<f64> = x.iter().map(|r| r[j]).collect();
            col.sort_by(f64::total_cmp);
            let m = col.iter().sum::<f64>() / n;
            let mut dev: Vec<f64> = col.iter().map(|v| (v - m).powi(2)).collect();
            dev.sort_by(f64::total_cmp);
            let v = dev.iter().sum::<f64>() / n;
            mean.push(m);
            std.push(if v > 1e-24 { v.sqrt() } else { 1.0 });
        }
        Self { mean, std }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LinearModel {
    w: Vec<f64>,
    b: f64,
}

impl LinearModel {
    fn score(&self, x: &[f64]) -> f64 {
        crate::ndcore::dot(&self.w, x) + self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
struct KernelMachine {
    support: Vec<Vec<f64>>,
    coef: Vec<f64>,
    rho: f64,
    gamma: f64,
}

impl KernelMachine {
    fn score(&self, x: &[f64]) -> f64 {
        self.support.iter().zip(&self.coef).map(|(s, c)| c * rbf(s, x, self.gamma)).sum::<f64>() - self.rho
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(usize),
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

impl Node {
    fn predict(&self, x: &[f64]) -> usize {
        match self {
            Node::Leaf(c) => *c,
            Node::Split { feature, threshold, left, right } => {
                if x[*feature] <= *threshold {
                    left.predict(x)
                } else {
                    right.predict(x)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Fitted {
    Constant(usize),
    Linear { scaler: Scaler, models: Vec<LinearModel> },
    Kernel { scaler: Scaler, models: Vec<KernelMachine> },
    Forest { trees: Vec<Node> },
    Knn { scaler: Scaler, x: Vec<Vec<f64>>, y: Vec<usize>, k: usize },
}

/// A fitted classifier. Immutable after fitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    kind: ClassifierKind,
    n_features: usize,
    /// Sorted distinct training labels.
    classes: Vec<usize>,
    fitted: Fitted,
    degenerate: bool,
}

fn check_shape(x: &[Vec<f64>], y: Option<&[usize]>) -> Result<usize, ClfError> {
    if let Some(y) = y {
        if x.len() != y.len() {
            return Err(ClfError::ShapeMismatch(format!("{} rows vs {} labels", x.len(), y.len())));
        }
    }
    let k = x.first().map_or(0, Vec::len);
    if x.iter().any(|r| r.len() != k) {
        return Err(ClfError::ShapeMismatch("ragged feature rows".into()));
    }
    Ok(k)
}

/// Fit a classifier. A single-class training set yields a constant
/// classifier flagged as degenerate.
pub fn fit(kind: ClassifierKind, x: &[Vec<f64>], y: &[usize], hp: &Hyperparams, seed: u64) -> Result<Classifier, ClfError> {
    let k = check_shape(x, Some(y))?;
    if x.is_empty() {
        return Err(ClfError::Empty);
    }
    let mut classes: Vec<usize> = y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() == 1 {
        return Ok(Classifier { kind, n_features: k, fitted: Fitted::Constant(classes[0]), classes, degenerate: true });
    }
    // Binary problems use one model scoring the larger label; multiclass
    // problems use one-vs-rest.
    let targets: Vec<usize> = if classes.len() == 2 { vec![classes[1]] } else { classes.clone() };
    let signs = |c: usize| -> Vec<f64> { y.iter().map(|&l| if l == c { 1.0 } else { -1.0 }).collect() };
    let fitted = match kind {
        ClassifierKind::Logistic | ClassifierKind::LinearSvm => {
            let scaler = Scaler::fit(x);
            let xs: Vec<Vec<f64>> = x.iter().map(|r| scaler.apply(r)).collect();
            let models = targets
                .iter()
                .map(|&c| {
                    if kind == ClassifierKind::Logistic {
                        fit_logistic(&xs, &signs(c), hp)
                    } else {
                        fit_squared_hinge(&xs, &signs(c), hp)
                    }
                })
                .collect();
            Fitted::Linear { scaler, models }
        }
        ClassifierKind::KernelSvm => {
            let scaler = Scaler::fit(x);
            let xs: Vec<Vec<f64>> = x.iter().map(|r| scaler.apply(r)).collect();
            let gamma = hp.gamma.unwrap_or(1.0 / k.max(1) as f64);
            let models = targets.iter().map(|&c| fit_smo(&xs, &signs(c), hp.svm_c, gamma)).collect();
            Fitted::Kernel { scaler, models }
        }
        ClassifierKind::RandomForest => {
            let mtry = hp.max_features.unwrap_or((k as f64).sqrt().ceil() as usize).clamp(1, k.max(1));
            let trees = crate::par::map_range(hp.n_trees.max(1), |t| {
                let mut r = rng::from_seed(rng::derive_indexed(seed, "tree", t as u64));
                let rows: Vec<usize> = if hp.bootstrap {
                    (0..x.len()).map(|_| rng::index(&mut r, x.len())).collect()
                } else {
                    (0..x.len()).collect()
                };
                let mut builder = TreeBuilder { x, y, n_classes: classes[classes.len() - 1] + 1, mtry, max_depth: hp.max_depth, rng: r };
                builder.build(rows, 0)
            });
            Fitted::Forest { trees }
        }
        ClassifierKind::Knn => {
            let scaler = Scaler::fit(x);
            let xs = x.iter().map(|r| scaler.apply(r)).collect();
            Fitted::Knn { scaler, x: xs, y: y.to_vec(), k: hp.k.max(1) }
        }
    };
    Ok(Classifier { kind, n_features: k, classes, fitted, degenerate: false })
}

fn sigmoid(t: f64) -> f64 {
    crate::ndcore::sigmoid(t)
}

/// Solve `A x = b` for symmetric positive definite `A` (row-major, d×d).
pub(crate) fn cholesky_solve(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for p in 0..j {
                s -= l[i * d + p] * l[j * d + p];
            }
            if i == j {
                l[i * d + i] = s.max(1e-300).sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    let mut z = vec![0.0; d];
    for i in 0..d {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * d + p] * z[p];
        }
        z[i] = s / l[i * d + i];
    }
    let mut out = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = z[i];
        for p in i + 1..d {
            s -= l[p * d + i] * out[p];
        }
        out[i] = s / l[i * d + i];
    }
    out
}

/// Damped Newton on a smooth convex objective over `[w; b]`.
/// `eval(θ)` returns `(value, gradient, hessian)`.
fn newton(d: usize, max_iters: usize, eval: impl Fn(&[f64], bool) -> (f64, Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let mut theta = vec![0.0; d];
    let (mut f, mut g, mut h) = eval(&theta, true);
    for _ in 0..max_iters {
        let step = cholesky_solve(&h, &g, d);
        let decrement: f64 = step.iter().zip(&g).map(|(s, g)| s * g).sum();
        if decrement.abs() < 1e-14 {
            break;
        }
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..50 {
            let cand: Vec<f64> = theta.iter().zip(&step).map(|(p, s)| p - t * s).collect();
            let (fc, _, _) = eval(&cand, false);
            if fc <= f - 1e-4 * t * decrement {
                theta = cand;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
        (f, g, h) = eval(&theta, true);
    }
    theta
}

fn augmented(x: &[f64]) -> impl Iterator<Item = f64> + '_ {
    x.iter().copied().chain(std::iter::once(1.0))
}

/// L2-regularized logistic regression by Newton's method. The bias gets a
/// negligible penalty only to keep the Hessian well conditioned.
fn fit_logistic(x: &[Vec<f64>], s: &[f64], hp: &Hyperparams) -> LinearModel {
    let k = x[0].len();
    let d = k + 1;
    let n = x.len() as f64;
    let lam = hp.l2;
    let theta = newton(d, hp.max_iters, |th, second| {
        let mut f = 0.0;
        let mut g = vec![0.0; d];
        let mut h = if second { vec![0.0; d * d] } else { Vec::new() };
        for (row, &yi) in x.iter().zip(s) {
            let m = yi * augmented(row).zip(th).map(|(a, b)| a * b).sum::<f64>();
            f += if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
            if second {
                let p = sigmoid(-m);
                let xa: Vec<f64> = augmented(row).collect();
                for i in 0..d {
                    g[i] -= yi * p * xa[i];
                    let w = p * (1.0 - p);
                    for j in 0..=i {
                        h[i * d + j] += w * xa[i] * xa[j];
                    }
                }
            }
        }
        f /= n;
        let reg = |i: usize| if i < k { lam } else { 1e-10 };
        f += th.iter().enumerate().map(|(i, t)| 0.5 * reg(i) * t * t).sum::<f64>();
        if second {
            for i in 0..d {
                g[i] = g[i] / n + reg(i) * th[i];
                for j in 0..=i {
                    h[i * d + j] /= n;
                    h[j * d + i] = h[i * d + j];
                }
                h[i * d + i] += reg(i);
            }
        }
        (f, g, h)
    });
    LinearModel { w: theta[..k].to_vec(), b: theta[k] }
}

/// L2-regularized squared-hinge linear SVM by generalized Newton.
fn fit_squared_hinge(x: &[Vec<f64>], s: &[f64], hp: &Hyperparams) -> LinearModel {
    let k = x[0].len();
    let d = k + 1;
    let n = x.len() as f64;
    let lam = hp.l2;
    let theta = newton(d, hp.max_iters, |th, second| {
        let mut f = 0.0;
        let mut g = vec![0.0; d];
        let mut h = if second { vec![0.0; d * d] } else { Vec::new() };
        for (row, &yi) in x.iter().zip(s) {
            let m = yi * augmented(row).zip(th).map(|(a, b)| a * b).sum::<f64>();
            if m < 1.0 {
                f += (1.0 - m).powi(2);
                if second {
                    let xa: Vec<f64> = augmented(row).collect();
                    for i in 0..d {
                        g[i] -= 2.0 * yi * (1.0 - m) * xa[i];
                        for j in 0..=i {
                            h[i * d + j] += 2.0 * xa[i] * xa[j];
                        }
                    }
                }
            }
        }
        f /= n;
        let reg = |i: usize| if i < k { lam } else { 1e-10 };
        f += th.iter().enumerate().map(|(i, t)| 0.5 * reg(i) * t * t).sum::<f64>();
        if second {
            for i in 0..d {
                g[i] = g[i] / n + reg(i) * th[i];
                for j in 0..=i {
                    h[i * d + j] /= n;
                    h[j * d + i] = h[i * d + j];
                }
                h[i * d + i] += reg(i);
            }
        }
        (f, g, h)
    });
    LinearModel { w: theta[..k].to_vec(), b: theta[k] }
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (-gamma * d2).exp()
}

const SMO_TOL: f64 = 1e-3;
const TAU: f64 = 1e-12;
const KERNEL_CACHE_BYTES: usize = 64 << 20;

/// Soft-margin RBF SVM dual by SMO with maximal-violating-pair selection.
/// Kernel rows are computed on demand.
fn fit_smo(x: &[Vec<f64>], y: &[f64], c: f64, gamma: f64) -> KernelMachine {
    let n = x.len();
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    // Rows are cached while they fit in a fixed budget, then recomputed.
    let cache_rows = (KERNEL_CACHE_BYTES / (8 * n.max(1))).max(2);
    let mut cache: std::collections::HashMap<usize, std::rc::Rc<Vec<f64>>> = std::collections::HashMap::new();
    let mut kernel_row = |i: usize| -> std::rc::Rc<Vec<f64>> {
        if let Some(r) = cache.get(&i) {
            return r.clone();
        }
        let row = std::rc::Rc::new((0..n).map(|t| rbf(&x[i], &x[t], gamma)).collect::<Vec<f64>>());
        if cache.len() >= cache_rows {
            cache.clear();
        }
        cache.insert(i, row.clone());
        row
    };
    let max_iter = (100 * n).max(10_000);
    let up = |t: usize, a: &[f64]| (y[t] > 0.0 && a[t] < c) || (y[t] < 0.0 && a[t] > 0.0);
    let low = |t: usize, a: &[f64]| (y[t] > 0.0 && a[t] > 0.0) || (y[t] < 0.0 && a[t] < c);
    for _ in 0..max_iter {
        let mut i = None;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = None;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if up(t, &alpha) && v > gmax {
                gmax = v;
                i = Some(t);
            }
            if low(t, &alpha) && v < gmin {
                gmin = v;
                j = Some(t);
            }
        }
        let (Some(i), Some(j)) = (i, j) else { break };
        if gmax - gmin < SMO_TOL {
            break;
        }
        let ki = kernel_row(i);
        let kj = kernel_row(j);
        let (old_ai, old_aj) = (alpha[i], alpha[j]);
        if y[i] != y[j] {
            let quad = (ki[i] + kj[j] - 2.0 * ki[j]).max(TAU);
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let quad = (ki[i] + kj[j] - 2.0 * ki[j]).max(TAU);
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (dai, daj) = (alpha[i] - old_ai, alpha[j] - old_aj);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * ki[t] * dai + y[j] * kj[t] * daj);
        }
    }
    // Offset from free vectors, or the midpoint of the feasible interval.
    let mut free_sum = 0.0;
    let mut free = 0;
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            free_sum += yg;
            free += 1;
        } else if (alpha[t] >= c && y[t] < 0.0) || (alpha[t] <= 0.0 && y[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free > 0 { free_sum / free as f64 } else { 0.5 * (ub + lb) };
    let mut support = Vec::new();
    let mut coef = Vec::new();
    for t in 0..n {
        if alpha[t] > 0.0 {
            support.push(x[t].clone());
            coef.push(alpha[t] * y[t]);
        }
    }
    KernelMachine { support, coef, rho, gamma }
}

fn gini(counts: &[usize], total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    best
}

struct TreeBuilder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    n_classes: usize,
    mtry: usize,
    max_depth: usize,
    rng: rng::Rng,
}

/// Best threshold split of `rows` on `feature`: `(weighted gini, threshold)`.
fn best_split(x: &[Vec<f64>], y: &[usize], n_classes: usize, rows: &[usize], feature: usize) -> Option<(f64, f64)> {
    let mut sorted: Vec<(f64, usize)> = rows.iter().map(|&r| (x[r][feature], y[r])).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut right = vec![0usize; n_classes];
    for &(_, c) in &sorted {
        right[c] += 1;
    }
    let mut left = vec![0usize; n_classes];
    let n = sorted.len();
    let mut best: Option<(f64, f64)> = None;
    for i in 0..n - 1 {
        let c = sorted[i].1;
        left[c] += 1;
        right[c] -= 1;
        if sorted[i].0 == sorted[i + 1].0 {
            continue;
        }
        let nl = i + 1;
        let score = (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
        if best.is_none_or(|(s, _)| score < s) {
            best = Some((score, 0.5 * (sorted[i].0 + sorted[i + 1].0)));
        }
    }
    best
}

impl TreeBuilder<'_> {
    fn build(&mut self, rows: Vec<usize>, depth: usize) -> Node {
        let mut counts = vec![0usize; self.n_classes];
        for &r in &rows {
            counts[self.y[r]] += 1;
        }
        let node_gini = gini(&counts, rows.len());
        if depth >= self.max_depth || rows.len() < 2 || node_gini == 0.0 {
            return Node::Leaf(majority(&counts));
        }
        let k = self.x[0].len();
        let features = rng::sample_without_replacement(&mut self.rng, k, self.mtry.min(k));
        let mut best: Option<(f64, usize, f64)> = None;
        for &f in &features {
            if let Some((score, thr)) = best_split(self.x, self.y, self.n_classes, &rows, f) {
                if best.is_none_or(|(s, _, _)| score < s) {
                    best = Some((score, f, thr));
                }
            }
        }
        match best {
            Some((score, feature, threshold)) if score < node_gini => {
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][feature] <= threshold);
                Node::Split {
                    feature,
                    threshold,
                    left: Box::new(self.build(l, depth + 1)),
                    right: Box::new(self.build(r, depth + 1)),
                }
            }
            _ => Node::Leaf(majority(&counts)),
        }
    }
}

impl Classifier {
    pub fn kind(&self) -> ClassifierKind {
        self.kind
    }

    /// Whether training labels had a single class.
    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    fn pick(&self, scores: &[f64]) -> usize {
        if scores.len() == 1 {
            return if scores[0] > 0.0 { self.classes[1] } else { self.classes[0] };
        }
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        self.classes[best]
    }

    fn predict_one(&self, row: &[f64]) -> usize {
        match &self.fitted {
            Fitted::Constant(c) => *c,
            Fitted::Linear { scaler, models } => {
                let z = scaler.apply(row);
                self.pick(&models.iter().map(|m| m.score(&z)).collect::<Vec<_>>())
            }
            Fitted::Kernel { scaler, models } => {
                let z = scaler.apply(row);
                self.pick(&models.iter().map(|m| m.score(&z)).collect::<Vec<_>>())
            }
            Fitted::Forest { trees } => {
                let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
                for t in trees {
                    *votes.entry(t.predict(row)).or_default() += 1;
                }
                vote_winner(&votes)
            }
            Fitted::Knn { scaler, x, y, k } => {
                let z = scaler.apply(row);
                let mut d: Vec<(f64, usize)> = x
                    .iter()
                    .zip(y)
                    .map(|(p, &l)| (p.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>(), l))
                    .collect();
                d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                let mut votes: BTreeMap<usize, usize> = BTreeMap::new();
                for &(_, l) in d.iter().take(*k) {
                    *votes.entry(l).or_default() += 1;
                }
                vote_winner(&votes)
            }
        }
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>, ClfError> {
        if x.iter().any(|r| r.len() != self.n_features) {
            return Err(ClfError::ShapeMismatch(format!("expected {} features", self.n_features)));
        }
        Ok(x.iter().map(|r| self.predict_one(r)).collect())
    }

    pub fn evaluate(&self, x: &[Vec<f64>], y: &[usize]) -> Result<EvalReport, ClfError> {
        check_shape(x, Some(y))?;
        Ok(EvalReport::from_predictions(&self.predict(x)?, y))
    }
}

/// Most votes; ties toward the smaller label.
fn vote_winner(votes: &BTreeMap<usize, usize>) -> usize {
    let mut best = (0, usize::MAX);
    for (&label, &n) in votes {
        if n > best.0 {
            best = (n, label);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Percent correct.
    pub accuracy: f64,
    /// `(label, recall %, support)` per class present in the labels.
    pub per_class: Vec<(usize, f64, usize)>,
    pub n: usize,
}

impl EvalReport {
    pub fn from_predictions(pred: &[usize], truth: &[usize]) -> Self {
        let n = truth.len();
        let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
        let mut support: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (p, t) in pred.iter().zip(truth) {
            let e = support.entry(*t).or_default();
            e.1 += 1;
            if p == t {
                e.0 += 1;
            }
        }
        let per_class =
            support.into_iter().map(|(l, (hit, tot))| (l, 100.0 * hit as f64 / tot as f64, tot)).collect();
        let accuracy = if n == 0 { 0.0 } else { 100.0 * correct as f64 / n as f64 };
        Self { accuracy, per_class, n }
    }

    pub fn recall(&self, label: usize) -> Option<f64> {
        self.per_class.iter().find(|(l, _, _)| *l == label).map(|(_, r, _)| *r)
    }

    /// Recall on members (label 1).
    pub fn pa(&self) -> f64 {
        self.recall(1).unwrap_or(0.0)
    }

    /// Recall on non-members (label 0).
    pub fn na(&self) -> f64 {
        self.recall(0).unwrap_or(0.0)
    }

    /// Copy with every percentage rounded to two decimals.
    pub fn rounded(&self) -> Self {
        let r = |v: f64| round2(v);
        Self { accuracy: r(self.accuracy), per_class: self.per_class.iter().map(|&(l, v, s)| (l, r(v), s)).collect(), n: self.n }
    }
}

pub fn round2(v: f64) -> f64 {
    (v * 100.0).round() / 100.0
}

#[cfg(test)]
mod tests;

//! Downstream utility of synthetic data: predict one attribute from the
//! others, training either on original or on synthetic records and always
//! testing on held-out original records.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clf::{self, ClassifierKind, Hyperparams};
use crate::dataset::Dataset;
use crate::dptrain::{self, PrivacySpec};
use crate::genmodel::{build_plan, GenError, GenerativeModel, Mode, ModelConfig, TrainConfig};
use crate::rng;
use crate::scg::{GroupGraph, VarKind};
use crate::svg;

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("only {available} categorical or binary attributes, {requested} tasks requested")]
    InsufficientCategoricalTargets { available: usize, requested: usize },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("epsilon {0} is unreachable with the configured training schedule")]
    UnreachableEpsilon(f64),
    #[error(transparent)]
    Model(#[from] GenError),
    #[error(transparent)]
    Classifier(#[from] clf::ClfError),
}

pub const TRAIN_FRACTION: f64 = 0.7;
pub const DEFAULT_PAIRPLOT_ATTRIBUTES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtilityTask {
    pub target: usize,
    pub features: Vec<usize>,
    pub train_rows: Vec<usize>,
    pub test_rows: Vec<usize>,
}

/// Label value of `data[i, target]` (hidden cells read as 0).
fn label(data: &Dataset, i: usize, target: usize) -> usize {
    data.get(i, target).unwrap_or(0.0) as usize
}

/// Stratified split: the first `⌈0.7·n_c⌉` of each shuffled class go to
/// training.
fn stratified_split(data: &Dataset, target: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::from_seed(seed);
    let mut by_class: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..data.n_rows() {
        by_class.entry(label(data, i, target)).or_default().push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for rows in by_class.values_mut() {
        rng::shuffle(&mut r, rows);
        let k = (TRAIN_FRACTION * rows.len() as f64).ceil() as usize;
        train.extend_from_slice(&rows[..k]);
        test.extend_from_slice(&rows[k..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// `count` distinct discrete target attributes, each with its own
/// stratified 70/30 split.
pub fn make_tasks(data: &Dataset, count: usize, seed: u64) -> Result<Vec<UtilityTask>, UtilityError> {
    let candidates: Vec<usize> = (0..data.n_cols()).filter(|&j| data.schema()[j].kind.is_discrete()).collect();
    if count > candidates.len() {
        return Err(UtilityError::InsufficientCategoricalTargets { available: candidates.len(), requested: count });
    }
    let mut r = rng::from_seed(rng::derive(seed, "targets"));
    let picks = rng::sample_without_replacement(&mut r, candidates.len(), count);
    Ok(picks
        .into_iter()
        .map(|p| {
            let target = candidates[p];
            let (train_rows, test_rows) = stratified_split(data, target, rng::derive_indexed(seed, "split", target as u64));
            UtilityTask { target, features: (0..data.n_cols()).filter(|&j| j != target).collect(), train_rows, test_rows }
        })
        .collect())
}

/// Feature rows with categorical attributes one-hot encoded.
pub fn design_matrix(data: &Dataset, features: &[usize]) -> Vec<Vec<f64>> {
    (0..data.n_rows())
        .map(|i| {
            let mut row = Vec::new();
            for &j in features {
                let v = data.get(i, j);
                match data.schema()[j].kind {
                    VarKind::Categorical(c) if c > 2 => {
                        let start = row.len();
                        row.resize(start + c, 0.0);
                        if let Some(v) = v {
                            row[start + v as usize] = 1.0;
                        }
                    }
                    _ => row.push(v.unwrap_or(0.0)),
                }
            }
            row
        })
        .collect()
}

fn labels(data: &Dataset, target: usize) -> Vec<usize> {
    (0..data.n_rows()).map(|i| label(data, i, target)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityCell {
    pub target: String,
    pub classifier: ClassifierKind,
    /// Test accuracy (%) when trained on the first arm.
    pub original: f64,
    /// Test accuracy (%) when trained on the second arm.
    pub synthetic: f64,
    /// `original − synthetic`; negative means synthetic training helped.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub cells: Vec<UtilityCell>,
    pub mean_original: f64,
    pub mean_synthetic: f64,
    pub mean_delta: f64,
}

impl UtilityReport {
    fn from_cells(cells: Vec<UtilityCell>) -> Self {
        let n = cells.len().max(1) as f64;
        let mean = |f: &dyn Fn(&UtilityCell) -> f64| cells.iter().map(f).sum::<f64>() / n;
        Self {
            mean_original: mean(&|c| c.original),
            mean_synthetic: mean(&|c| c.synthetic),
            mean_delta: mean(&|c| c.delta),
            cells,
        }
    }

    /// Mean delta per classifier kind, in `kinds` order.
    pub fn mean_delta_by_classifier(&self) -> Vec<(ClassifierKind, f64)> {
        let mut kinds: Vec<ClassifierKind> = self.cells.iter().map(|c| c.classifier).collect();
        kinds.sort();
        kinds.dedup();
        kinds
            .into_iter()
            .map(|k| {
                let v: Vec<f64> = self.cells.iter().filter(|c| c.classifier == k).map(|c| c.delta).collect();
                (k, v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }
}

/// Paired comparison for one target: each kind is fitted on `arm_a` and on
/// `arm_b` with the same seed and evaluated on `test`.
pub fn compare_arms(
    arm_a: &Dataset,
    arm_b: &Dataset,
    test: &Dataset,
    target: usize,
    kinds: &[ClassifierKind],
    hp: &Hyperparams,
    seed: u64,
) -> Result<Vec<UtilityCell>, UtilityError> {
    for d in [arm_b, test] {
        if d.schema() != arm_a.schema() {
            return Err(UtilityError::SchemaMismatch("arms must share a schema".into()));
        }
    }
    let features: Vec<usize> = (0..arm_a.n_cols()).filter(|&j| j != target).collect();
    let (xa, ya) = (design_matrix(arm_a, &features), labels(arm_a, target));
    let (xb, yb) = (design_matrix(arm_b, &features), labels(arm_b, target));
    let (xt, yt) = (design_matrix(test, &features), labels(test, target));
    let name = arm_a.schema()[target].name.clone();
    crate::par::try_map_range(kinds.len(), |k| {
        let s = rng::derive_indexed(seed, "classifier", k as u64);
        let acc = |x: &[Vec<f64>], y: &[usize]| -> Result<f64, UtilityError> {
            Ok(clf::fit(kinds[k], x, y, hp, s)?.evaluate(&xt, &yt)?.accuracy)
        };
        let original = acc(&xa, &ya)?;
        let synthetic = acc(&xb, &yb)?;
        Ok(UtilityCell { target: name.clone(), classifier: kinds[k], original, synthetic, delta: original - synthetic })
    })
}

/// Rows of `synthetic` resampled to `n`: without replacement when enough
/// rows exist, with replacement otherwise.
fn resample(synthetic: &Dataset, n: usize, seed: u64) -> Dataset {
    let mut r = rng::from_seed(seed);
    let m = synthetic.n_rows();
    let rows = if m >= n {
        rng::sample_without_replacement(&mut r, m, n)
    } else {
        (0..n).map(|_| rng::index(&mut r, m)).collect()
    };
    synthetic.select_rows(&rows)
}

/// Paired utility comparison of classifiers trained on original versus
/// synthetic records.
pub fn evaluate_utility(
    original: &Dataset,
    synthetic: &Dataset,
    tasks: &[UtilityTask],
    kinds: &[ClassifierKind],
    hp: &Hyperparams,
    seed: u64,
) -> Result<UtilityReport, UtilityError> {
    if original.schema() != synthetic.schema() {
        return Err(UtilityError::SchemaMismatch("original and synthetic schemas differ".into()));
    }
    if synthetic.n_rows() == 0 {
        return Err(UtilityError::SchemaMismatch("synthetic dataset is empty".into()));
    }
    let mut cells = Vec::new();
    for (t, task) in tasks.iter().enumerate() {
        let train = original.select_rows(&task.train_rows);
        let syn = resample(synthetic, task.train_rows.len(), rng::derive_indexed(seed, "resample", t as u64));
        let test = original.select_rows(&task.test_rows);
        cells.extend(compare_arms(&train, &syn, &test, task.target, kinds, hp, rng::derive_indexed(seed, "task", t as u64))?);
    }
    Ok(UtilityReport::from_cells(cells))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub clip_norm: f64,
    pub n_tasks: usize,
    pub classifiers: Vec<ClassifierKind>,
    pub hp: Hyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    /// Requested budget; `None` is the non-private limit.
    pub epsilon: Option<f64>,
    pub achieved_epsilon: Option<f64>,
    pub sigma: f64,
    pub causal: f64,
    pub associational: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    /// Mean accuracy of classifiers trained on the original training split.
    pub original: f64,
    pub points: Vec<SweepPoint>,
    /// Points where a mode's utility dropped as ε grew.
    pub non_monotone: Vec<String>,
}

/// Train causal and associational models at each budget and score the
/// synthetic data by mean downstream accuracy. All tasks share one random
/// 70/30 split; generators see only the training part.
pub fn privacy_utility_sweep(
    data: &Dataset,
    graph: &GroupGraph,
    epsilons: &[f64],
    cfg: &SweepConfig,
    seed: u64,
) -> Result<SweepTable, UtilityError> {
    let n = data.n_rows();
    let mut r = rng::from_seed(rng::derive(seed, "split"));
    let mut order: Vec<usize> = (0..n).collect();
    rng::shuffle(&mut r, &mut order);
    let n_train = (TRAIN_FRACTION * n as f64).round() as usize;
    let mut train_rows = order[..n_train].to_vec();
    let mut test_rows = order[n_train..].to_vec();
    train_rows.sort_unstable();
    test_rows.sort_unstable();
    let train = data.select_rows(&train_rows);
    let test = data.select_rows(&test_rows);
    let targets: Vec<usize> = make_tasks(data, cfg.n_tasks, rng::derive(seed, "tasks"))?.into_iter().map(|t| t.target).collect();

    let batch = cfg.train.batch_size.min(n_train);
    let q = batch as f64 / n_train as f64;
    let steps = (cfg.train.epochs * n_train.div_ceil(batch)) as u64;
    let delta = 1.0 / n_train as f64;

    let score = |synthetic: &Dataset| -> Result<(f64, f64), UtilityError> {
        let mut cells = Vec::new();
        for (t, &target) in targets.iter().enumerate() {
            cells.extend(compare_arms(&train, synthetic, &test, target, &cfg.classifiers, &cfg.hp, rng::derive_indexed(seed, "task", t as u64))?);
        }
        let rep = UtilityReport::from_cells(cells);
        Ok((rep.mean_original, rep.mean_synthetic))
    };

    let mut points = Vec::new();
    let mut original = 0.0;
    for &eps in epsilons {
        let (spec, sigma) = if eps.is_finite() {
            let sigma = dptrain::calibrate_sigma(q, steps, delta, eps, 1e-3).map_err(|_| UtilityError::UnreachableEpsilon(eps))?;
            (Some(PrivacySpec::new(cfg.clip_norm, sigma, delta, q).map_err(|_| UtilityError::UnreachableEpsilon(eps))?), sigma)
        } else {
            (None, 0.0)
        };
        let mut utilities = [0.0; 2];
        let mut achieved = None;
        for (m, mode) in [Mode::Causal, Mode::Associational].into_iter().enumerate() {
            let plan = build_plan(train.schema(), Some(graph), cfg.model.latent_dim, mode)?;
            let mut model = GenerativeModel::new(plan, train.schema().to_vec(), cfg.model, rng::derive(seed, "init"));
            let fit = model.fit(&train, &cfg.train, spec.as_ref(), rng::derive(seed, "fit"))?;
            achieved = fit.account.map(|a| a.epsilon);
            let synthetic = model.sample_synthetic(n_train, &mut rng::from_seed(rng::derive(seed, "sample")))?;
            let (orig, syn) = score(&synthetic)?;
            original = orig;
            utilities[m] = syn;
        }
        points.push(SweepPoint {
            epsilon: eps.is_finite().then_some(eps),
            achieved_epsilon: achieved,
            sigma,
            causal: utilities[0],
            associational: utilities[1],
        });
    }
    let mut sorted: Vec<&SweepPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.epsilon.unwrap_or(f64::INFINITY).total_cmp(&b.epsilon.unwrap_or(f64::INFINITY)));
    let mut non_monotone = Vec::new();
    for w in sorted.windows(2) {
        for (name, f) in [("causal", (|p: &SweepPoint| p.causal) as fn(&SweepPoint) -> f64), ("associational", |p| p.associational)] {
            if f(w[1]) < f(w[0]) {
                non_monotone.push(format!("{name}: utility drops from eps {:?} to {:?}", w[0].epsilon, w[1].epsilon));
            }
        }
    }
    Ok(SweepTable { original, points, non_monotone })
}

/// Paired attribute columns tagged by source, plus an SVG scatter matrix.
pub struct Pairplot {
    pub attributes: Vec<String>,
    pub csv: String,
    pub svg: String,
}

/// Pairplot of `attribute_count` randomly chosen attributes.
pub fn pairplot_export(original: &Dataset, synthetic: &Dataset, attribute_count: usize, seed: u64) -> Result<Pairplot, UtilityError> {
    if original.schema() != synthetic.schema() {
        return Err(UtilityError::SchemaMismatch("original and synthetic schemas differ".into()));
    }
    let k = original.n_cols();
    let count = attribute_count.min(k);
    let mut cols = rng::sample_without_replacement(&mut rng::from_seed(seed), k, count);
    cols.sort_unstable();
    let names: Vec<String> = cols.iter().map(|&j| original.schema()[j].name.clone()).collect();
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["source".to_string()];
    header.extend(names.iter().cloned());
    wtr.write_record(&header).expect("in-memory write");
    let mut series = Vec::new();
    for (tag, d) in [("original", original), ("synthetic", synthetic)] {
        let columns: Vec<Vec<f64>> = cols.iter().map(|&j| (0..d.n_rows()).map(|i| d.get(i, j).unwrap_or(f64::NAN)).collect()).collect();
        for i in 0..d.n_rows() {
            let mut rec = vec![tag.to_string()];
            rec.extend(columns.iter().map(|c| format!("{:?}", c[i])));
            wtr.write_record(&rec).expect("in-memory write");
        }
        series.push(svg::Series { name: tag.to_string(), columns });
    }
    let csv = String::from_utf8(wtr.into_inner().expect("in-memory flush")).expect("utf-8 csv");
    let svg = svg::scatter_matrix(&names, &series);
    Ok(Pairplot { attributes: names, csv, svg })
}

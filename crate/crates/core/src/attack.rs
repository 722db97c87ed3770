//! Shadow-model membership inference against generative models that only
//! expose synthetic samples.
//!
//! For every target record and repetition two models are trained, one with
//! and one without the target. Each model contributes `n_s` synthetic
//! samples whose summary features are labelled by membership, and a
//! classifier is trained to tell the two apart.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clf::{self, ClassifierKind, EvalReport, Hyperparams};
use crate::dataset::Dataset;
use crate::dptrain::PrivacySpec;
use crate::genmodel::{build_plan, GenerativeModel, Mode, ModelConfig, TrainConfig};
use crate::rng::{self, Rng};
use crate::scg::{GroupGraph, VarKind};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("invalid attack config: {0}")]
    InvalidConfig(String),
    #[error("training failed for target {target} repetition {rep} (member={member}): {message}")]
    Training { target: usize, rep: usize, member: bool, message: String },
    #[error("extractor used before fitting bins")]
    UnfittedBins,
    #[error("report grids differ: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Classifier(#[from] clf::ClfError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Number of target records.
    pub n_targets: usize,
    /// Repetitions per target.
    pub reps: usize,
    /// Shadow training-set size, including the target for member models.
    pub train_size: usize,
    /// Synthetic samples drawn per shadow model.
    pub n_samples: usize,
    /// Records per synthetic sample.
    pub sample_size: usize,
    /// Fixed target row indices instead of random ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<usize>>,
}

impl AttackConfig {
    pub fn validate(&self, n: usize) -> Result<(), AttackError> {
        let bad = |m: String| Err(AttackError::InvalidConfig(m));
        if self.n_targets == 0 || self.reps == 0 || self.n_samples == 0 || self.sample_size == 0 || self.train_size == 0 {
            return bad("all counts must be positive".into());
        }
        if self.train_size > n {
            return bad(format!("shadow training size {} exceeds dataset size {n}", self.train_size));
        }
        if self.n_targets > n {
            return bad(format!("{} targets requested from {n} records", self.n_targets));
        }
        if let Some(t) = &self.targets {
            if t.len() != self.n_targets || t.iter().any(|&i| i >= n) {
                return bad("fixed targets must list n_targets valid row indices".into());
            }
        }
        Ok(())
    }

    /// Number of shadow models trained by [`run_attack`].
    pub fn model_count(&self) -> usize {
        self.n_targets * self.reps * 2
    }
}

/// Anything that can be sampled for synthetic records.
pub trait Sampler: Send + Sync {
    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Dataset, String>;
}

/// A recipe turning a training set into a sampler.
pub trait ShadowTrainer: Sync {
    fn train(&self, data: &Dataset, seed: u64) -> Result<Box<dyn Sampler>, String>;

    /// Description stored in reports.
    fn describe(&self) -> serde_json::Value;
}

impl Sampler for GenerativeModel {
    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Dataset, String> {
        self.sample_synthetic(n, rng).map_err(|e| e.to_string())
    }
}

/// Trains a [`GenerativeModel`], optionally with DP-SGD.
#[derive(Debug, Clone)]
pub struct GenerativeTrainer {
    pub mode: Mode,
    pub graph: Option<GroupGraph>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `(clip norm, noise multiplier)`; δ and q follow the training set.
    pub dp: Option<(f64, f64)>,
}

impl ShadowTrainer for GenerativeTrainer {
    fn train(&self, data: &Dataset, seed: u64) -> Result<Box<dyn Sampler>, String> {
        let plan = build_plan(data.schema(), self.graph.as_ref(), self.model.latent_dim, self.mode)
            .map_err(|e| e.to_string())?;
        let mut m = GenerativeModel::new(plan, data.schema().to_vec(), self.model, rng::derive(seed, "init"));
        let privacy = match self.dp {
            Some((c, sigma)) => Some(
                PrivacySpec::for_dataset(c, sigma, data.n_rows(), self.train.batch_size).map_err(|e| e.to_string())?,
            ),
            None => None,
        };
        m.fit(data, &self.train, privacy.as_ref(), rng::derive(seed, "fit")).map_err(|e| e.to_string())?;
        Ok(Box::new(m))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "trainer": "generative",
            "mode": self.mode,
            "model": self.model,
            "train": self.train,
            "dp": self.dp.map(|(c, s)| serde_json::json!({"clip": c, "sigma": s})),
        })
    }
}

/// Replays its training records verbatim, cycling through a shuffled copy.
/// Any sample of at least `|D|` records contains every training record.
#[derive(Debug, Clone, Copy, Default)]
pub struct Memorizer;

struct Replay(Dataset);

impl Sampler for Replay {
    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Dataset, String> {
        let m = self.0.n_rows();
        if m == 0 {
            return Err("empty training set".into());
        }
        let mut order: Vec<usize> = (0..m).collect();
        let mut rows = Vec::with_capacity(n);
        while rows.len() < n {
            rng::shuffle(rng, &mut order);
            rows.extend(order.iter().take(n - rows.len()));
        }
        Ok(self.0.select_rows(&rows))
    }
}

impl ShadowTrainer for Memorizer {
    fn train(&self, data: &Dataset, _seed: u64) -> Result<Box<dyn Sampler>, String> {
        Ok(Box::new(Replay(data.clone())))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({"trainer": "memorizer"})
    }
}

/// Ignores its training data and resamples rows of a fixed reference
/// dataset with replacement.
#[derive(Debug, Clone)]
pub struct Oblivious {
    pub reference: Dataset,
}

struct Bootstrap(Dataset);

impl Sampler for Bootstrap {
    fn sample(&self, n: usize, rng: &mut Rng) -> Result<Dataset, String> {
        let m = self.0.n_rows();
        let rows: Vec<usize> = (0..n).map(|_| rng::index(rng, m)).collect();
        Ok(self.0.select_rows(&rows))
    }
}

impl ShadowTrainer for Oblivious {
    fn train(&self, _data: &Dataset, _seed: u64) -> Result<Box<dyn Sampler>, String> {
        Ok(Box::new(Bootstrap(self.reference.clone())))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({"trainer": "oblivious"})
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Naive,
    Histogram,
    Correlations,
    Ensemble,
}

impl ExtractorKind {
    pub const ALL: [ExtractorKind; 4] =
        [ExtractorKind::Naive, ExtractorKind::Histogram, ExtractorKind::Correlations, ExtractorKind::Ensemble];

    pub fn name(self) -> &'static str {
        match self {
            ExtractorKind::Naive => "naive",
            ExtractorKind::Histogram => "histogram",
            ExtractorKind::Correlations => "correlations",
            ExtractorKind::Ensemble => "ensemble",
        }
    }

    /// Label used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            ExtractorKind::Naive => "Naive",
            ExtractorKind::Histogram => "Histogram",
            ExtractorKind::Correlations => "Correlations",
            ExtractorKind::Ensemble => "Ensemble",
        }
    }
}

impl std::str::FromStr for ExtractorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "naive" => Ok(ExtractorKind::Naive),
            "hist" | "histogram" => Ok(ExtractorKind::Histogram),
            "corr" | "correlations" => Ok(ExtractorKind::Correlations),
            "ens" | "ensemble" => Ok(ExtractorKind::Ensemble),
            _ => Err(format!("unknown extractor {s:?}")),
        }
    }
}

pub const CONTINUOUS_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bins {
    Categories(usize),
    Range { low: f64, high: f64, bins: usize },
}

/// Histogram bins fitted on the attacked dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedBins(pub Vec<Bins>);

impl FittedBins {
    pub fn fit(reference: &Dataset) -> Self {
        let bins = reference
            .schema()
            .iter()
            .enumerate()
            .map(|(j, v)| match v.kind {
                VarKind::Binary => Bins::Categories(2),
                VarKind::Categorical(c) => Bins::Categories(c),
                VarKind::Continuous => {
                    let vals: Vec<f64> = (0..reference.n_rows()).filter_map(|i| reference.get(i, j)).collect();
                    let low = vals.iter().copied().fold(f64::INFINITY, f64::min);
                    let high = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let (low, high) = if low.is_finite() { (low, high) } else { (0.0, 1.0) };
                    Bins::Range { low, high, bins: CONTINUOUS_BINS }
                }
            })
            .collect();
        FittedBins(bins)
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Per column: mean, median, population variance.
pub fn naive_features(sample: &Dataset) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 * sample.n_cols());
    for j in 0..sample.n_cols() {
        let mut col = sample.column(j);
        col.sort_by(f64::total_cmp);
        let n = col.len().max(1) as f64;
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        out.extend([mean, median(&col), var]);
    }
    out
}

pub fn histogram_features(sample: &Dataset, bins: &FittedBins) -> Result<Vec<f64>, AttackError> {
    if bins.0.len() != sample.n_cols() {
        return Err(AttackError::UnfittedBins);
    }
    let mut out = Vec::new();
    for (j, b) in bins.0.iter().enumerate() {
        let col = sample.column(j);
        match *b {
            Bins::Categories(c) => {
                let mut counts = vec![0.0; c];
                for v in col {
                    counts[(v as usize).min(c - 1)] += 1.0;
                }
                out.extend(counts);
            }
            Bins::Range { low, high, bins } => {
                let mut counts = vec![0.0; bins];
                let width = (high - low) / bins as f64;
                for v in col {
                    let idx = if width > 0.0 { ((v - low) / width).floor() } else { 0.0 };
                    counts[idx.clamp(0.0, (bins - 1) as f64) as usize] += 1.0;
                }
                out.extend(counts);
            }
        }
    }
    Ok(out)
}

/// Upper-triangular Pearson correlations, row by row; zero-variance pairs
/// contribute 0.
pub fn correlation_features(sample: &Dataset) -> Vec<f64> {
    let k = sample.n_cols();
    let n = sample.n_rows().max(1) as f64;
    let centred: Vec<(Vec<f64>, f64)> = (0..k)
        .map(|j| {
            let col = sample.column(j);
            let m = col.iter().sum::<f64>() / n;
            let c: Vec<f64> = col.iter().map(|v| v - m).collect();
            let ss = c.iter().map(|v| v * v).sum::<f64>();
            (c, ss)
        })
        .collect();
    let mut out = Vec::with_capacity(k * k.saturating_sub(1) / 2);
    for a in 0..k {
        for b in a + 1..k {
            let (ca, sa) = &centred[a];
            let (cb, sb) = &centred[b];
            if *sa <= 1e-24 || *sb <= 1e-24 {
                out.push(0.0);
            } else {
                let r = ca.iter().zip(cb).map(|(x, y)| x * y).sum::<f64>() / (sa * sb).sqrt();
                out.push(r.clamp(-1.0, 1.0));
            }
        }
    }
    out
}

pub fn extract_features(kind: ExtractorKind, sample: &Dataset, bins: &FittedBins) -> Result<Vec<f64>, AttackError> {
    Ok(match kind {
        ExtractorKind::Naive => naive_features(sample),
        ExtractorKind::Histogram => histogram_features(sample, bins)?,
        ExtractorKind::Correlations => correlation_features(sample),
        ExtractorKind::Ensemble => {
            let mut v = naive_features(sample);
            v.extend(histogram_features(sample, bins)?);
            v.extend(correlation_features(sample));
            v
        }
    })
}

/// Feature rows of one extractor with membership labels and the shadow
/// model each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub model_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackCell {
    pub extractor: ExtractorKind,
    pub classifier: ClassifierKind,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub config: AttackConfig,
    pub trainer: serde_json::Value,
    pub seed: u64,
    pub targets: Vec<usize>,
    pub models_trained: usize,
    pub train_models: usize,
    pub eval_models: usize,
    pub cells: Vec<AttackCell>,
}

impl AttackReport {
    pub fn cell(&self, e: ExtractorKind, c: ClassifierKind) -> Option<&AttackCell> {
        self.cells.iter().find(|x| x.extractor == e && x.classifier == c)
    }

    /// Mean accuracy over classifiers for one extractor.
    pub fn mean_accuracy(&self, e: ExtractorKind) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|x| x.extractor == e).map(|x| x.report.accuracy).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Shadow-model indices: `(target slot, repetition, member)` in job order.
fn jobs(cfg: &AttackConfig) -> Vec<(usize, usize, bool)> {
    let mut v = Vec::with_capacity(cfg.model_count());
    for t in 0..cfg.n_targets {
        for r in 0..cfg.reps {
            v.push((t, r, false));
            v.push((t, r, true));
        }
    }
    v
}

/// Stratified model-level split: 80% of member and of non-member models go
/// to training, keeping at least one of each on both sides when possible.
fn split_models(labels: &[bool], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut r = rng::from_seed(seed);
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for member in [false, true] {
        let mut ids: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == member).collect();
        rng::shuffle(&mut r, &mut ids);
        let n = ids.len();
        let mut n_train = ((0.8 * n as f64).round() as usize).min(n);
        if n >= 2 {
            n_train = n_train.clamp(1, n - 1);
        }
        train.extend_from_slice(&ids[..n_train]);
        eval.extend_from_slice(&ids[n_train..]);
    }
    train.sort_unstable();
    eval.sort_unstable();
    (train, eval)
}

/// Run the full attack against `trainer` on dataset `d`.
pub fn run_attack(
    d: &Dataset,
    trainer: &dyn ShadowTrainer,
    cfg: &AttackConfig,
    extractors: &[ExtractorKind],
    classifiers: &[ClassifierKind],
    hp: &Hyperparams,
    seed: u64,
) -> Result<AttackReport, AttackError> {
    let n = d.n_rows();
    cfg.validate(n)?;
    let targets = match &cfg.targets {
        Some(t) => t.clone(),
        None => rng::sample_without_replacement(&mut rng::from_seed(rng::derive(seed, "targets")), n, cfg.n_targets),
    };
    let bins = FittedBins::fit(d);
    let job_list = jobs(cfg);
    // Features per job: one row per synthetic sample per extractor.
    let per_job = crate::par::try_map_range(job_list.len(), |j| -> Result<Vec<Vec<Vec<f64>>>, AttackError> {
        let (ti, rep, member) = job_list[j];
        let target = targets[ti];
        let slot = (ti * cfg.reps + rep) as u64;
        let mut base_rng = rng::from_seed(rng::derive_indexed(seed, "base", slot));
        let others: Vec<usize> = (0..n).filter(|&i| i != target).collect();
        let mut rows: Vec<usize> = rng::sample_without_replacement(&mut base_rng, others.len(), cfg.train_size - 1)
            .into_iter()
            .map(|i| others[i])
            .collect();
        rows.sort_unstable();
        if member {
            rows.push(target);
        }
        let train = d.select_rows(&rows);
        let err = |message: String| AttackError::Training { target, rep, member, message };
        let model = trainer.train(&train, rng::derive_indexed(seed, "shadow", j as u64)).map_err(err)?;
        let mut sample_rng = rng::from_seed(rng::derive_indexed(seed, "samples", j as u64));
        let mut out = vec![Vec::with_capacity(cfg.n_samples); extractors.len()];
        for _ in 0..cfg.n_samples {
            let s = model.sample(cfg.sample_size, &mut sample_rng).map_err(err)?;
            for (e, kind) in extractors.iter().enumerate() {
                out[e].push(extract_features(*kind, &s, &bins)?);
            }
        }
        Ok(out)
    })?;
    let model_labels: Vec<bool> = job_list.iter().map(|j| j.2).collect();
    let (train_models, eval_models) = split_models(&model_labels, rng::derive(seed, "split"));
    let dataset_for = |e: usize, models: &[usize]| {
        let mut ds = AttackDataset { features: Vec::new(), labels: Vec::new(), model_ids: Vec::new() };
        for &m in models {
            for row in &per_job[m][e] {
                ds.features.push(row.clone());
                ds.labels.push(usize::from(model_labels[m]));
                ds.model_ids.push(m);
            }
        }
        ds
    };
    let grid: Vec<(usize, ClassifierKind)> =
        (0..extractors.len()).flat_map(|e| classifiers.iter().map(move |&c| (e, c))).collect();
    let cells = crate::par::try_map_range(grid.len(), |g| -> Result<AttackCell, AttackError> {
        let (e, kind) = grid[g];
        let train = dataset_for(e, &train_models);
        let eval = dataset_for(e, &eval_models);
        let c = clf::fit(kind, &train.features, &train.labels, hp, rng::derive_indexed(seed, "classifier", g as u64))?;
        Ok(AttackCell { extractor: extractors[e], classifier: kind, report: c.evaluate(&eval.features, &eval.labels)? })
    })?;
    Ok(AttackReport {
        config: cfg.clone(),
        trainer: trainer.describe(),
        seed,
        targets,
        models_trained: job_list.len(),
        train_models: train_models.len(),
        eval_models: eval_models.len(),
        cells,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaCell {
    pub extractor: ExtractorKind,
    pub classifier: ClassifierKind,
    /// `accuracy_a − accuracy_b`; positive means `b`'s configuration defends.
    pub delta: f64,
}

pub fn advantage_delta(a: &AttackReport, b: &AttackReport) -> Result<Vec<DeltaCell>, AttackError> {
    let key = |r: &AttackReport| r.cells.iter().map(|c| (c.extractor, c.classifier)).collect::<Vec<_>>();
    let (ka, mut kb) = (key(a), key(b));
    let mut sa = ka.clone();
    sa.sort();
    kb.sort();
    if sa != kb {
        return Err(AttackError::GridMismatch(format!("{} cells vs {} cells", sa.len(), kb.len())));
    }
    Ok(ka
        .into_iter()
        .map(|(e, c)| DeltaCell {
            extractor: e,
            classifier: c,
            delta: a.cell(e, c).expect("present").report.accuracy - b.cell(e, c).expect("present").report.accuracy,
        })
        .collect())
}

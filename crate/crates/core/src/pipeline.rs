//! End-to-end experiment runs: manifest validation, seeded stages over the
//! {causal, associational} × {DP, non-DP} model grid, append-only run
//! directories and report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attack::{self, AttackConfig, AttackReport, DeltaCell, ExtractorKind, GenerativeTrainer};
use crate::clf::{ClassifierKind, Hyperparams};
use crate::dataset::{self, Dataset, DatasetManifest};
use crate::dptrain::{self, PrivacySpec};
use crate::genmodel::{build_plan, GenerativeModel, Mode, ModelConfig, TrainConfig};
use crate::par;
use crate::rng;
use crate::scg::{self, CausalGraph, GroupGraph, SyntheticGraphConfig};
use crate::svg;
use crate::utility::{self, SweepConfig, SweepTable, UtilityReport};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid manifest: {0}")]
    Validation(String),
    #[error("seed label {0:?} is not registered in the manifest")]
    UnregisteredSeed(String),
    #[error("unsupported report schema version {0}")]
    SchemaVersion(u32),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("stage {stage} failed: {message}")]
    Stage { stage: String, message: String },
}

impl PipelineError {
    /// 2 for validation problems, 3 for failures during execution.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) | PipelineError::UnregisteredSeed(_) | PipelineError::SchemaVersion(_) => 2,
            PipelineError::Io { .. } | PipelineError::Stage { .. } => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    /// Sample `n` records from a seeded random graph.
    Synthetic {
        #[serde(default)]
        graph: SyntheticGraphConfig,
        n: usize,
    },
    /// CSV with companion manifest, plus an optional graph file. Relative
    /// paths resolve against the manifest's directory.
    File {
        path: String,
        #[serde(default)]
        graph: Option<String>,
        /// Expected content hash of the dataset.
        #[serde(default)]
        sha256: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSection {
    pub config: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Rows sampled from each trained model; defaults to the dataset size.
    #[serde(default)]
    pub synthetic_rows: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacySection {
    pub clip_norm: f64,
    /// Calibrate σ to this budget...
    #[serde(default)]
    pub target_epsilon: Option<f64>,
    /// ...or use this σ directly.
    #[serde(default)]
    pub noise_multiplier: Option<f64>,
    /// Defaults to `1/n`.
    #[serde(default)]
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySection {
    pub tasks: usize,
    pub classifiers: Vec<ClassifierKind>,
    #[serde(default)]
    pub hp: Hyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSection {
    pub config: AttackConfig,
    pub extractors: Vec<ExtractorKind>,
    pub classifiers: Vec<ClassifierKind>,
    #[serde(default)]
    pub hp: Hyperparams,
    /// Shadow-model overrides; default to the main model section.
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSection {
    /// Budgets to sweep; `null` entries mean non-private.
    pub epsilons: Vec<Option<f64>>,
    pub tasks: usize,
    pub classifiers: Vec<ClassifierKind>,
    #[serde(default)]
    pub hp: Hyperparams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub seed: u64,
    pub dataset: DatasetSource,
    pub model: ModelSection,
    pub privacy: PrivacySection,
    #[serde(default)]
    pub utility: Option<UtilitySection>,
    #[serde(default)]
    pub attack: Option<AttackSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    /// Attribute count for the pairplot export.
    #[serde(default)]
    pub pairplot: Option<usize>,
    #[serde(default = "default_seed_labels")]
    pub seed_labels: Vec<String>,
    /// Fail when a stage asks for a seed label missing from `seed_labels`.
    #[serde(default)]
    pub audit: bool,
    /// Worker threads for parallel stages; `None` uses every core.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default = "tool_version")]
    pub tool_version: String,
}

fn tool_version() -> String {
    TOOL_VERSION.to_string()
}

/// The four models of the grid, in report order.
pub const MODEL_GRID: [(&str, Mode, bool); 4] = [
    ("causal-dp", Mode::Causal, true),
    ("causal-nodp", Mode::Causal, false),
    ("associational-dp", Mode::Associational, true),
    ("associational-nodp", Mode::Associational, false),
];

/// Every label a run derives a seed from. Model trainers derive their own
/// `init`, `fit`, `shuffle`, `reparam` and `dp-noise` streams below these.
pub fn default_seed_labels() -> Vec<String> {
    let mut labels = vec!["data".to_string()];
    for (name, _, _) in MODEL_GRID {
        labels.push(format!("model/{name}"));
        labels.push(format!("sample/{name}"));
    }
    labels.extend(["utility", "attack", "sweep", "pairplot"].map(String::from));
    labels
}

impl ExperimentManifest {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let m: Self = serde_json::from_str(text).map_err(|e| PipelineError::Validation(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    /// Hash of everything that can change results; the worker budget is
    /// left out since outputs do not depend on it.
    pub fn sha256(&self) -> String {
        let hashed = Self { workers: None, ..self.clone() };
        hex::encode(Sha256::digest(serde_json::to_vec(&hashed).expect("manifest serializes")))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Validation(m.into()));
        if self.run_id.is_empty() || !self.run_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || self.run_id.starts_with('.') {
            return bad("run_id must be nonempty and use only [A-Za-z0-9._-]");
        }
        if let DatasetSource::Synthetic { n, graph } = &self.dataset {
            if *n < 2 || graph.k == 0 {
                return bad("synthetic dataset needs n ≥ 2 and k ≥ 1");
            }
        }
        self.model.train.validate().map_err(|e| PipelineError::Validation(e.to_string()))?;
        if self.model.config.latent_dim == 0 || self.model.config.hidden == 0 {
            return bad("latent_dim and hidden must be positive");
        }
        let p = &self.privacy;
        if !(p.clip_norm.is_finite() && p.clip_norm > 0.0) {
            return bad("clip_norm must be positive and finite");
        }
        match (p.target_epsilon, p.noise_multiplier) {
            (Some(e), None) if e.is_finite() && e > 0.0 => {}
            (None, Some(s)) if s.is_finite() && s > 0.0 => {}
            _ => return bad("give exactly one of a positive target_epsilon or noise_multiplier"),
        }
        if let Some(d) = p.delta {
            if !(d > 0.0 && d < 1.0) {
                return bad("delta must lie in (0, 1)");
            }
        }
        if let Some(u) = &self.utility {
            if u.classifiers.is_empty() {
                return bad("utility needs at least one classifier");
            }
        }
        if let Some(a) = &self.attack {
            if a.extractors.is_empty() || a.classifiers.is_empty() {
                return bad("attack needs extractors and classifiers");
            }
        }
        if let Some(s) = &self.sweep {
            if s.epsilons.is_empty() || s.classifiers.is_empty() {
                return bad("sweep needs epsilons and classifiers");
            }
            if s.epsilons.iter().flatten().any(|e| !(e.is_finite() && *e > 0.0)) {
                return bad("sweep epsilons must be positive");
            }
        }
        if self.workers == Some(0) {
            return bad("workers must be positive");
        }
        Ok(())
    }

    /// Stage names in execution order.
    pub fn stages(&self) -> Vec<String> {
        let mut s = vec!["data", "calibrate", "train"];
        if self.utility.is_some() {
            s.push("utility");
        }
        if self.attack.is_some() {
            s.push("attack");
        }
        if self.sweep.is_some() {
            s.push("sweep");
        }
        if self.pairplot.is_some() {
            s.push("pairplot");
        }
        s.push("report");
        s.into_iter().map(String::from).collect()
    }
}

/// Seed derivation with an optional registry check.
pub struct SeedBook {
    master: u64,
    registered: Option<BTreeSet<String>>,
    consumed: Mutex<BTreeMap<String, u64>>,
}

impl SeedBook {
    pub fn new(master: u64, registered: Option<&[String]>) -> Self {
        Self { master, registered: registered.map(|r| r.iter().cloned().collect()), consumed: Mutex::default() }
    }

    pub fn seed(&self, label: &str) -> Result<u64, PipelineError> {
        if let Some(reg) = &self.registered {
            if !reg.contains(label) {
                return Err(PipelineError::UnregisteredSeed(label.into()));
            }
        }
        let s = rng::derive(self.master, label);
        self.consumed.lock().expect("seed book lock").insert(label.into(), s);
        Ok(s)
    }

    pub fn consumed(&self) -> BTreeMap<String, u64> {
        self.consumed.lock().expect("seed book lock").clone()
    }
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// An append-only run directory: files are written once, never replaced.
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// `out/<run_id>`, or `out/<run_id>-2`, `-3`, … when earlier runs exist.
    pub fn create(out_root: &Path, run_id: &str) -> Result<Self, PipelineError> {
        fs::create_dir_all(out_root).map_err(io_err(out_root))?;
        for i in 1.. {
            let name = if i == 1 { run_id.to_string() } else { format!("{run_id}-{i}") };
            let root = out_root.join(name);
            match fs::create_dir(&root) {
                Ok(()) => return Ok(Self { root }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(io_err(&root)(e)),
            }
        }
        unreachable!()
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.root.join(rel);
        if path.exists() {
            return Err(PipelineError::Io {
                path: path.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "run directories are append-only"),
            });
        }
        write_atomic(&path, bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Planned,
    Ok,
    Failed,
    Skipped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunStatus {
    Complete,
    Partial,
    DryRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub n: usize,
    pub k: usize,
    pub sha256: String,
    pub schema_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub name: String,
    pub mode: Mode,
    pub dp: bool,
    pub epsilon: Option<f64>,
    pub steps: usize,
    pub final_loss: f64,
    pub checkpoint: String,
    pub synthetic: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilitySummary {
    /// Mean accuracy of each classifier trained on original data.
    pub baseline: Vec<(ClassifierKind, f64)>,
    pub models: Vec<(String, UtilityReport)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedAttack {
    pub model: String,
    pub dp: bool,
    pub report: AttackReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub name: String,
    /// Model without the method.
    pub baseline: String,
    /// Model with the method.
    pub treatment: String,
    pub cells: Vec<DeltaCell>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub reports: Vec<NamedAttack>,
    pub deltas: Vec<DeltaTable>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub run_id: String,
    pub manifest_sha256: String,
    pub tool_version: String,
    pub status: RunStatus,
    pub stages: Vec<StageRecord>,
    pub seeds: BTreeMap<String, u64>,
    pub dataset: Option<DatasetInfo>,
    pub ledger: Option<Value>,
    pub models: Vec<ModelRecord>,
    pub utility: Option<UtilitySummary>,
    pub attack: Option<AttackSummary>,
    pub sweep: Option<SweepTable>,
    /// Files in the run directory, relative to it.
    pub artifacts: Vec<String>,
}

impl RunReport {
    fn new(m: &ExperimentManifest) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            run_id: m.run_id.clone(),
            manifest_sha256: m.sha256(),
            tool_version: m.tool_version.clone(),
            status: RunStatus::Complete,
            stages: m.stages().into_iter().map(|name| StageRecord { name, status: StageStatus::Planned, error: None }).collect(),
            seeds: BTreeMap::new(),
            dataset: None,
            ledger: None,
            models: Vec::new(),
            utility: None,
            attack: None,
            sweep: None,
            artifacts: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Parse and reject unknown schema versions.
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        let v: Value = serde_json::from_str(text).map_err(|e| PipelineError::Validation(e.to_string()))?;
        let version = v.get("schema_version").and_then(Value::as_u64).unwrap_or(0) as u32;
        if version != REPORT_SCHEMA_VERSION {
            return Err(PipelineError::SchemaVersion(version));
        }
        serde_json::from_value(v).map_err(|e| PipelineError::Validation(e.to_string()))
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Validate and plan only.
    pub dry_run: bool,
}

pub struct RunOutcome {
    pub report: RunReport,
    pub dir: Option<PathBuf>,
}

/// State handed from stage to stage.
#[derive(Default)]
struct Work {
    data: Option<Dataset>,
    graph: Option<CausalGraph>,
    groups: Option<GroupGraph>,
    spec: Option<PrivacySpec>,
    synthetic: Vec<(String, Dataset)>,
}

struct Ctx<'a> {
    m: &'a ExperimentManifest,
    base: &'a Path,
    dir: &'a RunDir,
    seeds: &'a SeedBook,
}

impl Ctx<'_> {
    fn write(&self, report: &mut RunReport, rel: &str, bytes: &[u8]) -> Result<(), String> {
        self.dir.write(rel, bytes).map_err(|e| e.to_string())?;
        report.artifacts.push(rel.to_string());
        Ok(())
    }

    fn seed(&self, label: &str) -> Result<u64, String> {
        self.seeds.seed(label).map_err(|e| e.to_string())
    }
}

/// Run every stage of the manifest into a fresh run directory under
/// `out_root`. Stage failures keep earlier artifacts and mark the report
/// partial; only validation problems return `Err` before anything is
/// written.
pub fn run_pipeline(m: &ExperimentManifest, base: &Path, out_root: &Path, opts: &RunOptions) -> Result<RunOutcome, PipelineError> {
    m.validate()?;
    if m.audit {
        let registered: BTreeSet<&String> = m.seed_labels.iter().collect();
        if let Some(missing) = default_seed_labels().into_iter().find(|l| !registered.contains(l)) {
            return Err(PipelineError::UnregisteredSeed(missing));
        }
    }
    let mut report = RunReport::new(m);
    if opts.dry_run {
        report.status = RunStatus::DryRun;
        return Ok(RunOutcome { report, dir: None });
    }
    let dir = RunDir::create(out_root, &m.run_id)?;
    let seeds = SeedBook::new(m.seed, m.audit.then_some(m.seed_labels.as_slice()));
    let ctx = Ctx { m, base, dir: &dir, seeds: &seeds };
    let mut work = Work::default();
    ctx.write(&mut report, "manifest.json", m.to_json().as_bytes()).map_err(|e| PipelineError::Stage { stage: "setup".into(), message: e })?;

    let mut failed = false;
    for i in 0..report.stages.len() {
        let name = report.stages[i].name.clone();
        if failed {
            report.stages[i].status = StageStatus::Skipped;
            continue;
        }
        let result = par::with_workers(m.workers, || run_stage(&name, &ctx, &mut work, &mut report));
        match result {
            Ok(()) => report.stages[i].status = StageStatus::Ok,
            Err(e) => {
                report.stages[i].status = StageStatus::Failed;
                report.stages[i].error = Some(e);
                report.status = RunStatus::Partial;
                failed = true;
            }
        }
    }
    report.seeds = seeds.consumed();
    report.artifacts.push("report.json".into());
    dir.write("report.json", report.to_json().as_bytes())?;
    Ok(RunOutcome { report, dir: Some(dir.path().to_path_buf()) })
}

fn run_stage(name: &str, ctx: &Ctx, work: &mut Work, report: &mut RunReport) -> Result<(), String> {
    match name {
        "data" => stage_data(ctx, work, report),
        "calibrate" => stage_calibrate(ctx, work, report),
        "train" => stage_train(ctx, work, report),
        "utility" => stage_utility(ctx, work, report),
        "attack" => stage_attack(ctx, work, report),
        "sweep" => stage_sweep(ctx, work, report),
        "pairplot" => stage_pairplot(ctx, work, report),
        "report" => stage_report(ctx, report),
        other => Err(format!("unknown stage {other}")),
    }
}

fn stage_data(ctx: &Ctx, work: &mut Work, report: &mut RunReport) -> Result<(), String> {
    let (data, graph) = match &ctx.m.dataset {
        DatasetSource::Synthetic { graph, n } => {
            let g = scg::synthetic_graph(graph);
            let d = scg::sample_dataset(&g, *n, &mut rng::from_seed(ctx.seed("data")?)).map_err(|e| e.to_string())?;
            (d, Some(g))
        }
        DatasetSource::File { path, graph, sha256 } => {
            let (d, _) = dataset::load_dataset(&ctx.base.join(path)).map_err(|e| e.to_string())?;
            if let Some(want) = sha256 {
                if &d.content_hash() != want {
                    return Err(format!("dataset hash {} does not match manifest {want}", d.content_hash()));
                }
            }
            let g = match graph {
                Some(p) => {
                    let text = fs::read_to_string(ctx.base.join(p)).map_err(|e| format!("{p}: {e}"))?;
                    Some(CausalGraph::from_json(&text).map_err(|e| e.to_string())?)
                }
                None => None,
            };
            (d, g)
        }
    };
    if let Some(g) = &graph {
        work.groups = Some(GroupGraph::from_graph(g).map_err(|e| e.to_string())?);
        ctx.write(report, "data/graph.json", g.to_json().as_bytes())?;
    }
    ctx.write(report, "data/original.csv", data.to_csv().as_bytes())?;
    let manifest = DatasetManifest::for_dataset(&data, None);
    ctx.write(report, "data/original.csv.manifest.json", serde_json::to_string_pretty(&manifest).expect("serializes").as_bytes())?;
    report.dataset = Some(DatasetInfo { n: data.n_rows(), k: data.n_cols(), sha256: data.content_hash(), schema_hash: data.schema_hash() });
    work.data = Some(data);
    work.graph = graph;
    Ok(())
}

fn stage_calibrate(ctx: &Ctx, work: &mut Work, report: &mut RunReport) -> Result<(), String> {
    let data = work.data.as_ref().ok_or("no dataset")?;
    let n = data.n_rows();
    let train = &ctx.m.model.train;
    let batch = train.batch_size.min(n);
    let q = batch as f64 / n as f64;
    let steps = (train.epochs * n.div_ceil(batch)) as u64;
    let p = &ctx.m.privacy;
    let delta = p.delta.unwrap_or(1.0 / n as f64);
    let sigma = match (p.noise_multiplier, p.target_epsilon) {
        (Some(s), _) => s,
        (None, Some(eps)) => dptrain::calibrate_sigma(q, steps, delta, eps, 1e-3).map_err(|e| e.to_string())?,
        (None, None) => unreachable!("validated"),
    };
    let spec = PrivacySpec::new(p.clip_norm, sigma, delta, q).map_err(|e| e.to_string())?;
    let ledger = dptrain::account(&spec, steps).to_ledger_json();
    ctx.write(report, "ledger.json", serde_json::to_string_pretty(&ledger).expect("serializes").as_bytes())?;
    report.ledger = Some(ledger);
    work.spec = Some(spec);
    Ok(())
}

fn stage_train(ctx: &Ctx, work: &mut Work, report: &mut RunReport) -> Result<(), String> {
    let data = work.data.as_ref().ok_or("no dataset")?;
    let spec = work.spec.ok_or("no privacy spec")?;
    let m = ctx.m;
    let rows = m.model.synthetic_rows.unwrap_or(data.n_rows());
    let mut seeds = Vec::new();
    for (name, _, _) in MODEL_GRID {
        seeds.push((ctx.seed(&format!("model/{name}"))?, ctx.seed(&format!("sample/{name}"))?));
    }
    let groups = work.groups.as_ref();
    let trained = par::try_map_range(MODEL_GRID.len(), |i| -> Result<_, String> {
        let (name, mode, dp) = MODEL_GRID[i];
        let (model_seed, sample_seed) = seeds[i];
        let plan = build_plan(data.schema(), groups, m.model.config.latent_dim, mode).map_err(|e| format!("{name}: {e}"))?;
        let mut model = GenerativeModel::new(plan, data.schema().to_vec(), m.model.config, rng::derive(model_seed, "init"));
        let privacy = dp.then_some(spec);
        let fit = model.fit(data, &m.model.train, privacy.as_ref(), rng::derive(model_seed, "fit")).map_err(|e| format!("{name}: {e}"))?;
        let synthetic = model.sample_synthetic(rows, &mut rng::from_seed(sample_seed)).map_err(|e| format!("{name}: {e}"))?;
        let mut checkpoint = model.to_checkpoint();
        checkpoint.training = Some(json!({
            "seed": model_seed,
            "train": m.model.train,
            "privacy": fit.account.as_ref().map(|a| a.to_ledger_json()),
        }));
        let record = ModelRecord {
            name: name.into(),
            mode,
            dp,
            epsilon: fit.account.as_ref().map(|a| a.epsilon),
            steps: fit.steps,
            final_loss: fit.loss_curve.last().copied().unwrap_or(f64::NAN),
            checkpoint: format!("models/{name}.json"),
            synthetic: format!("synthetic/{name}.csv"),
        };
        Ok((record, serde_json::to_string(&checkpoint).expect("checkpoint serializes"), synthetic))
    })?;
    for (record, checkpoint, synthetic) in trained {
        ctx.write(report, &record.checkpoint, checkpoint.as_bytes())?;
        ctx.write(report, &record.synthetic, synthetic.to_csv().as_bytes())?;
        work.synthetic.push((record.name.clone(), synthetic));
        report.models.push(record);
    }
    Ok(())
}

fn stage_utility(ctx: &Ctx, work: &mut Work, report: &mut RunReport) -> Result<(), String> {
    let u = ctx.m.utility.as_ref().expect("stage planned");
    let data = work.data.as_ref().ok_or("no dataset")?;
    let seed = ctx.seed("utility")?;
    let tasks = utility::make_tasks(data, u.tasks, rng::derive(seed, "tasks")).map_err(|e| e.to_string())?;
    let mut models = Vec::new();
    for (name, synthetic) in &work.synthetic {
        let r = utility::evaluate_utility(data, synthetic, &tasks, &u.classifiers, &u.hp, rng::derive(seed, "eval")).map_err(|e| e.to_string())?;
        models.push((name.clone(), r));
    }
    let baseline = u
        .classifiers
        .iter()
        .map(|&k| {
            let v: Vec<f64> = models[0].1.cells.iter().filter(|c| c.classifier == k).map(|c| c.original).collect();
            (k, v.iter().sum::<f64>() / v.len().max(1) as f64)
        })
        .collect();
    let summary = UtilitySummary { baseline, models };
    ctx.write(report, "utility.json", serde_json::to_string_pretty(&summary).expect("serializes").as_bytes())?;
    report.utility = Some(summary);
    Ok(())
}

/// Delta tables in the shape of the advantage figures: DP effect per mode,
/// causal effect with and without DP, and each DP model against the
/// unprotected associational baseline.
pub fn attack_deltas(reports: &[NamedAttack]) -> Result<Vec<DeltaTable>, String> {
    let find = |n: &str| reports.iter().find(|r| r.model == n).map(|r| &r.report).ok_or(format!("missing attack report {n}"));
    let pairs = [
        ("dp-effect-associational", "associational-nodp", "associational-dp"),
        ("dp-effect-causal", "causal-nodp", "causal-dp"),
        ("causal-effect-nodp", "associational-nodp", "causal-nodp"),
        ("causal-effect-dp", "associational-dp", "causal-dp"),
        ("causal-dp-vs-none", "associational-nodp", "causal-dp"),
    ];
    pairs
        .iter()
        .map(|&(name, a, b)| {
            let cells = attack::advantage_delta(find(a)?, find(b)?).map_err(|e| e.to_string())?;
            let mean = cells.iter().map(|c| c.delta).sum::<f64>() / cells.len().max(1) as f64;
            Ok(DeltaTable { name: name.into(), baseline: a.into(), treatment: b.into(), cells, mean })
        })
        .collect()
}

fn stage_attack(ctx: &Ctx, work: &mut Work, report: &mut RunReport) -> Result<(), String> {
    let a = ctx.m.attack.as_ref().expect("stage planned");
    let data = work.data.as_ref().ok_or("no dataset")?;
    let spec = work.spec.ok_or("no privacy spec")?;
    let seed = ctx.seed("attack")?;
    let mut reports = Vec::new();
    for (name, mode, dp) in MODEL_GRID {
        let trainer = GenerativeTrainer {
            mode,
            graph: work.groups.clone(),
            model: a.model.unwrap_or(ctx.m.model.config),
            train: a.train.unwrap_or(ctx.m.model.train),
            dp: dp.then_some((spec.clip_norm, spec.noise_multiplier)),
        };
        let r = attack::run_attack(data, &trainer, &a.config, &a.extractors, &a.classifiers, &a.hp, seed).map_err(|e| format!("{name}: {e}"))?;
        reports.push(NamedAttack { model: name.into(), dp, report: r });
    }
    let deltas = attack_deltas(&reports)?;
    let summary = AttackSummary { reports, deltas };
    ctx.write(report, "attack.json", serde_json::to_string_pretty(&summary).expect("serializes").as_bytes())?;
    report.attack = Some(summary);
    Ok(())
}

fn stage_sweep(ctx: &Ctx, work: &mut Work, report: &mut RunReport) -> Result<(), String> {
    let s = ctx.m.sweep.as_ref().expect("stage planned");
    let data = work.data.as_ref().ok_or("no dataset")?;
    let groups = work.groups.as_ref().ok_or("the sweep needs a causal graph")?;
    let cfg = SweepConfig {
        model: ctx.m.model.config,
        train: ctx.m.model.train,
        clip_norm: ctx.m.privacy.clip_norm,
        n_tasks: s.tasks,
        classifiers: s.classifiers.clone(),
        hp: s.hp,
    };
    let eps: Vec<f64> = s.epsilons.iter().map(|e| e.unwrap_or(f64::INFINITY)).collect();
    let table = utility::privacy_utility_sweep(data, groups, &eps, &cfg, ctx.seed("sweep")?).map_err(|e| e.to_string())?;
    ctx.write(report, "sweep.csv", sweep_csv(&table).as_bytes())?;
    report.sweep = Some(table);
    Ok(())
}

pub fn sweep_csv(t: &SweepTable) -> String {
    let mut out = String::from("epsilon,achieved_epsilon,sigma,causal,associational,original\n");
    let opt = |v: Option<f64>| v.map_or("inf".to_string(), |x| format!("{x:?}"));
    for p in &t.points {
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?},{:?}",
            opt(p.epsilon),
            p.achieved_epsilon.map_or(String::new(), |x| format!("{x:?}")),
            p.sigma,
            p.causal,
            p.associational,
            t.original
        );
    }
    out
}

fn stage_pairplot(ctx: &Ctx, work: &mut Work, report: &mut RunReport) -> Result<(), String> {
    let count = ctx.m.pairplot.expect("stage planned");
    let data = work.data.as_ref().ok_or("no dataset")?;
    let (_, synthetic) = work.synthetic.first().ok_or("no synthetic data")?;
    let p = utility::pairplot_export(data, synthetic, count, ctx.seed("pairplot")?).map_err(|e| e.to_string())?;
    ctx.write(report, "pairplot.csv", p.csv.as_bytes())?;
    ctx.write(report, "figures/pairplot.svg", p.svg.as_bytes())?;
    Ok(())
}

fn stage_report(ctx: &Ctx, report: &mut RunReport) -> Result<(), String> {
    // Render from a snapshot where this stage already reads as done.
    let mut snapshot = report.clone();
    if let Some(s) = snapshot.stages.iter_mut().find(|s| s.name == "report") {
        s.status = StageStatus::Ok;
    }
    let rendered = render_report(&snapshot).map_err(|e| e.to_string())?;
    for (name, svg) in &rendered.figures {
        ctx.write(report, name, svg.as_bytes())?;
    }
    ctx.write(report, "report.md", rendered.markdown.as_bytes())
}

pub struct Rendered {
    pub markdown: String,
    /// `(relative path, svg)` pairs.
    pub figures: Vec<(String, String)>,
}

fn fmt2(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.2}")
    } else {
        "-".into()
    }
}

/// Markdown tables plus SVG figures for a report.
pub fn render_report(r: &RunReport) -> Result<Rendered, PipelineError> {
    if r.schema_version != REPORT_SCHEMA_VERSION {
        return Err(PipelineError::SchemaVersion(r.schema_version));
    }
    let mut md = String::new();
    let mut figures = Vec::new();
    let status = match r.status {
        RunStatus::Complete => "complete",
        RunStatus::Partial => "partial",
        RunStatus::DryRun => "dry run",
    };
    let _ = writeln!(md, "# Run {}\n\nStatus: {status}. Manifest sha256 `{}`, tool version {}.\n", r.run_id, r.manifest_sha256, r.tool_version);

    md.push_str("## Stages\n\n| Stage | Status | Error |\n|---|---|---|\n");
    for s in &r.stages {
        let _ = writeln!(md, "| {} | {:?} | {} |", s.name, s.status, s.error.as_deref().unwrap_or(""));
    }

    if let Some(d) = &r.dataset {
        let _ = writeln!(md, "\n## Dataset\n\n{} records, {} attributes, sha256 `{}`.", d.n, d.k, d.sha256);
    }

    if let Some(l) = &r.ledger {
        md.push_str("\n## Privacy ledger\n\n| C | σ | q | T | δ | ε |\n|---|---|---|---|---|---|\n");
        let g = |k: &str| l.get(k).map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(md, "| {} | {} | {} | {} | {} | {} |", g("C"), g("sigma"), g("q"), g("T"), g("delta"), g("epsilon"));
    }

    if !r.models.is_empty() {
        md.push_str("\n## Models\n\n| Model | DP | ε | Steps | Final loss |\n|---|---|---|---|---|\n");
        for m in &r.models {
            let eps = m.epsilon.map_or("∞".to_string(), fmt2);
            let _ = writeln!(md, "| {} | {} | {} | {} | {} |", m.name, m.dp, eps, m.steps, fmt2(m.final_loss));
        }
    }

    if let Some(u) = &r.utility {
        md.push_str("\n## Downstream utility change\n\nOriginal minus synthetic accuracy in points; negative values mean the synthetic data trained a better classifier.\n\n");
        md.push_str("| Classifier | Original |");
        for (name, _) in &u.models {
            let _ = write!(md, " {name} |");
        }
        md.push_str("\n|---|---|");
        md.push_str(&"---|".repeat(u.models.len()));
        md.push('\n');
        for &(kind, base) in &u.baseline {
            let _ = write!(md, "| {} | {} |", kind.name(), fmt2(base));
            for (_, rep) in &u.models {
                let d = rep.mean_delta_by_classifier().into_iter().find(|(k, _)| *k == kind).map_or(f64::NAN, |x| x.1);
                let _ = write!(md, " {} |", fmt2(d));
            }
            md.push('\n');
        }
        md.push_str("| mean | |");
        for (_, rep) in &u.models {
            let _ = write!(md, " {} |", fmt2(rep.mean_delta));
        }
        md.push('\n');
    }

    md.push_str("\n## Membership inference\n\n");
    match &r.attack {
        None => {
            md.push_str("| DP | Feature Extractor | Attack Model | Accuracy | PA | NA |\n|---|---|---|---|---|---|\n");
            md.push_str("| disabled | | | | | |\n");
        }
        Some(a) => {
            for na in &a.reports {
                let _ = writeln!(md, "### {}\n\n| DP | Feature Extractor | Attack Model | Accuracy | PA | NA |\n|---|---|---|---|---|---|", na.model);
                for c in &na.report.cells {
                    let e = c.report.rounded();
                    let _ = writeln!(
                        md,
                        "| {} | {} | {} | {} | {} | {} |",
                        if na.dp { "yes" } else { "no" },
                        c.extractor.title(),
                        c.classifier.name(),
                        fmt2(e.accuracy),
                        fmt2(e.pa()),
                        fmt2(e.na())
                    );
                }
                md.push('\n');
            }
            md.push_str("### Advantage change\n\nAttack accuracy without the method minus accuracy with it; positive values mean the method defends.\n\n");
            for t in &a.deltas {
                let extractors: Vec<ExtractorKind> = dedup(t.cells.iter().map(|c| c.extractor));
                let classifiers: Vec<ClassifierKind> = dedup(t.cells.iter().map(|c| c.classifier));
                let _ = writeln!(md, "#### {} ({} → {}), mean {}\n", t.name, t.baseline, t.treatment, fmt2(t.mean));
                md.push_str("| Feature Extractor |");
                for c in &classifiers {
                    let _ = write!(md, " {} |", c.name());
                }
                md.push_str("\n|---|");
                md.push_str(&"---|".repeat(classifiers.len()));
                md.push('\n');
                let mut values = vec![vec![f64::NAN; extractors.len()]; classifiers.len()];
                for (ei, e) in extractors.iter().enumerate() {
                    let _ = write!(md, "| {} |", e.title());
                    for (ci, c) in classifiers.iter().enumerate() {
                        let d = t.cells.iter().find(|x| x.extractor == *e && x.classifier == *c).map_or(f64::NAN, |x| x.delta);
                        values[ci][ei] = d;
                        let _ = write!(md, " {} |", fmt2(d));
                    }
                    md.push('\n');
                }
                let path = format!("figures/delta-{}.svg", t.name);
                let _ = writeln!(md, "\n![{}]({path})\n", t.name);
                figures.push((
                    path,
                    svg::grouped_bars(
                        &format!("{}: {} to {}", t.name, t.baseline, t.treatment),
                        &extractors.iter().map(|e| e.title().to_string()).collect::<Vec<_>>(),
                        &classifiers.iter().map(|c| c.name().to_string()).collect::<Vec<_>>(),
                        &values,
                    ),
                ));
            }
        }
    }

    if let Some(s) = &r.sweep {
        md.push_str("\n## Privacy-utility sweep\n\n| ε | achieved ε | σ | causal | associational |\n|---|---|---|---|---|\n");
        for p in &s.points {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {} |",
                p.epsilon.map_or("∞".into(), fmt2),
                p.achieved_epsilon.map_or("∞".into(), fmt2),
                fmt2(p.sigma),
                fmt2(p.causal),
                fmt2(p.associational)
            );
        }
        let _ = writeln!(md, "\nClassifiers trained on original data: {}.", fmt2(s.original));
        for w in &s.non_monotone {
            let _ = writeln!(md, "\nFlag: {w}.");
        }
        let finite: Vec<_> = s.points.iter().filter(|p| p.epsilon.is_some()).collect();
        if !finite.is_empty() {
            let x: Vec<f64> = finite.iter().map(|p| p.epsilon.unwrap()).collect();
            let series = vec![
                ("causal".to_string(), finite.iter().map(|p| p.causal).collect()),
                ("associational".to_string(), finite.iter().map(|p| p.associational).collect()),
            ];
            figures.push(("figures/sweep.svg".into(), svg::lines("Mean downstream accuracy", "epsilon", &x, &series)));
            md.push_str("\n![sweep](figures/sweep.svg)\n");
        }
    }
    Ok(Rendered { markdown: md, figures })
}

fn dedup<T: Ord + Copy>(it: impl Iterator<Item = T>) -> Vec<T> {
    let mut seen = BTreeSet::new();
    it.filter(|x| seen.insert(*x)).collect()
}

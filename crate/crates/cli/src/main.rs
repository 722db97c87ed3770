use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use causynth::attack::{self, AttackConfig, AttackReport, ExtractorKind, GenerativeTrainer};
use causynth::clf::{ClassifierKind, Hyperparams};
use causynth::dataset::{self, Dataset};
use causynth::dptrain::{self, PrivacySpec};
use causynth::genmodel::{build_plan, GenerativeModel, Mode, ModelCheckpoint, ModelConfig, TrainConfig};
use causynth::pipeline::{self, ExperimentManifest, RunDir, RunOptions, RunReport, RunStatus};
use causynth::scg::{self, CausalGraph, GroupGraph, SyntheticGraphConfig};
use causynth::theorylab::{self, ErmProblem, LinearScg, Loss, TrialConfig};
use causynth::{rng, svg, utility};

#[derive(Parser)]
#[command(name = "causynth", version, about = "Causal, differentially private synthetic data: training, attacks and utility")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a dataset from a causal graph (random or given).
    GenData(GenData),
    /// Train one generative model and write its checkpoint.
    Train(Train),
    /// Draw synthetic records from a checkpoint.
    Sample(Sample),
    /// Privacy ledger for a grid of (C, σ), or σ calibrated to a target ε.
    Accountant(Accountant),
    /// Shadow-model membership inference against a generator.
    Attack(Attack),
    /// Per-cell advantage change between two attack reports (a − b).
    AttackDiff(AttackDiff),
    /// Downstream utility of a synthetic dataset.
    Utility(UtilityCmd),
    /// Privacy-utility sweep for causal vs associational models.
    Sweep(Sweep),
    /// Pairplot export of original vs synthetic attributes.
    Pairplot(PairplotCmd),
    /// Causal vs associational sensitivity trials in the convex lab.
    Theory(Theory),
    /// Full pipeline from a manifest.
    Run(Run),
    /// Render report.json to markdown and SVG.
    Report(ReportCmd),
}

#[derive(Args)]
struct GenData {
    /// Graph JSON to sample from; a random graph is drawn otherwise.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long, default_value_t = 22)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    continuous: usize,
    #[arg(long, default_value_t = 0.3)]
    edge_prob: f64,
    #[arg(long, default_value_t = 3)]
    max_parents: usize,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the graph here.
    #[arg(long)]
    graph_out: Option<PathBuf>,
}

/// Model settings shared by train, attack and sweep, read from JSON.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[serde(default)]
    mode: Option<Mode>,
    #[serde(default)]
    config: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: PathBuf,
    /// Causal graph JSON; required for causal mode.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    /// Overrides the mode in the model config.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long, conflicts_with = "target_epsilon")]
    sigma: Option<f64>,
    #[arg(long)]
    target_epsilon: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Sample {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Accountant {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    batch: usize,
    #[arg(long)]
    epochs: usize,
    /// Comma-separated noise multipliers.
    #[arg(long, value_delimiter = ',')]
    sigma: Vec<f64>,
    /// Comma-separated clip norms.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    clip: Vec<f64>,
    /// Defaults to 1/n.
    #[arg(long)]
    delta: Option<f64>,
    /// Calibrate σ by bisection instead of listing a grid.
    #[arg(long, conflicts_with = "sigma")]
    target_epsilon: Option<f64>,
}

#[derive(Args)]
struct Attack {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long, default_value_t = 5)]
    targets: usize,
    /// Explicit target rows; overrides --targets.
    #[arg(long, value_delimiter = ',')]
    target_rows: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 200)]
    train_size: usize,
    #[arg(long, default_value_t = 5)]
    samples: usize,
    #[arg(long, default_value_t = 200)]
    sample_size: usize,
    #[arg(long, value_delimiter = ',', default_value = "naive,hist,corr,ens")]
    extractors: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "all")]
    classifiers: Vec<String>,
    /// Train shadow models with DP-SGD at this clip norm and σ.
    #[arg(long, requires = "sigma")]
    clip: Option<f64>,
    #[arg(long, requires = "clip")]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AttackDiff {
    a: PathBuf,
    b: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct UtilityCmd {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long, default_value_t = 20)]
    tasks: usize,
    #[arg(long, value_delimiter = ',', default_value = "all")]
    classifiers: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    dir: OutDir,
}

#[derive(Args)]
struct Sweep {
    #[arg(long)]
    graph: PathBuf,
    /// Dataset to train on; sampled from the graph when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    /// Comma-separated budgets; `inf` for non-private.
    #[arg(long, value_delimiter = ',')]
    epsilons: Vec<f64>,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    clip: f64,
    #[arg(long, default_value_t = 10)]
    tasks: usize,
    #[arg(long, value_delimiter = ',', default_value = "all")]
    classifiers: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    dir: OutDir,
}

#[derive(Args)]
struct PairplotCmd {
    #[arg(long)]
    original: PathBuf,
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long, default_value_t = utility::DEFAULT_PAIRPLOT_ATTRIBUTES)]
    attributes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    dir: OutDir,
}

#[derive(Args)]
struct Theory {
    /// Linear graph JSON; the built-in spurious-feature graph otherwise.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Strength of the spurious child in the built-in graph.
    #[arg(long, default_value_t = 1.0)]
    spurious: f64,
    #[arg(long, default_value = "y")]
    target: String,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value = "squared")]
    loss: Loss,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long)]
    eta_bound: Option<f64>,
    #[arg(long, default_value_t = 0.01)]
    laplace_scale: f64,
    #[arg(long, default_value_t = 16)]
    probes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    dir: OutDir,
}

#[derive(Args)]
struct OutDir {
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Run directory name; suffixed when it already exists.
    #[arg(long)]
    run_id: Option<String>,
}

#[derive(Args)]
struct Run {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Validate and print the planned stages only.
    #[arg(long)]
    dry_run: bool,
    /// Overrides the manifest's worker budget.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct ReportCmd {
    report: PathBuf,
    /// Directory for report.md and figures; markdown goes to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit 2 for bad input, 3 for failures while computing.
enum CliError {
    Invalid(String),
    Failed(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 2,
            CliError::Failed(_) => 3,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

fn failed(e: impl std::fmt::Display) -> CliError {
    CliError::Failed(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Accountant(a) => accountant(a),
        Command::Attack(a) => run_attack(a),
        Command::AttackDiff(a) => attack_diff(a),
        Command::Utility(a) => utility_cmd(a),
        Command::Sweep(a) => sweep(a),
        Command::Pairplot(a) => pairplot(a),
        Command::Theory(a) => theory(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let (CliError::Invalid(m) | CliError::Failed(m)) = &e;
            eprintln!("error: {m}");
            ExitCode::from(e.code())
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    pipeline::write_atomic(path, text.as_bytes()).map_err(failed)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write(p, text),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn load_data(path: &Path) -> Result<Dataset> {
    dataset::load_dataset(path).map(|(d, _)| d).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_graph(path: &Path) -> Result<CausalGraph> {
    CausalGraph::from_json(&read(path)?).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_groups(path: Option<&PathBuf>) -> Result<Option<GroupGraph>> {
    path.map(|p| GroupGraph::from_graph(&load_graph(p)?).map_err(invalid)).transpose()
}

fn load_model_file(path: Option<&PathBuf>) -> Result<ModelFile> {
    let m: ModelFile = match path {
        Some(p) => serde_json::from_str(&read(p)?).map_err(|e| invalid(format!("{}: {e}", p.display())))?,
        None => ModelFile::default(),
    };
    m.train.validate().map_err(invalid)?;
    Ok(m)
}

fn parse_mode(flag: Option<&str>, file: Option<Mode>) -> Result<Mode> {
    match flag {
        Some("causal") => Ok(Mode::Causal),
        Some("associational") => Ok(Mode::Associational),
        Some(other) => Err(invalid(format!("unknown mode {other:?}"))),
        None => Ok(file.unwrap_or(Mode::Causal)),
    }
}

fn parse_classifiers(names: &[String]) -> Result<Vec<ClassifierKind>> {
    if names.iter().any(|n| n == "all") {
        return Ok(ClassifierKind::ALL.to_vec());
    }
    names.iter().map(|n| n.parse().map_err(invalid)).collect()
}

fn parse_extractors(names: &[String]) -> Result<Vec<ExtractorKind>> {
    if names.iter().any(|n| n == "all") {
        return Ok(ExtractorKind::ALL.to_vec());
    }
    names.iter().map(|n| n.parse().map_err(invalid)).collect()
}

fn run_dir(dir: &OutDir, default_id: &str) -> Result<RunDir> {
    RunDir::create(&dir.out, dir.run_id.as_deref().unwrap_or(default_id)).map_err(failed)
}

fn put(dir: &RunDir, rel: &str, text: &str) -> Result<()> {
    dir.write(rel, text.as_bytes()).map_err(failed)
}

fn pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializes")
}

fn gen_data(a: GenData) -> Result<u8> {
    let graph = match &a.graph {
        Some(p) => load_graph(p)?,
        None => {
            if a.k == 0 || a.continuous > a.k {
                return Err(invalid("need k ≥ 1 and continuous ≤ k"));
            }
            scg::synthetic_graph(&SyntheticGraphConfig { k: a.k, continuous: a.continuous, edge_prob: a.edge_prob, max_parents: a.max_parents, seed: a.seed })
        }
    };
    let data = scg::sample_dataset(&graph, a.n, &mut rng::from_seed(rng::derive(a.seed, "data"))).map_err(failed)?;
    dataset::save_dataset(&a.out, &data, Some(a.seed)).map_err(failed)?;
    if let Some(g) = &a.graph_out {
        write(g, &graph.to_json())?;
    }
    eprintln!("wrote {} records × {} attributes to {}", data.n_rows(), data.n_cols(), a.out.display());
    Ok(0)
}

fn train(a: Train) -> Result<u8> {
    let data = load_data(&a.data)?;
    let groups = load_groups(a.graph.as_ref())?;
    let mf = load_model_file(a.model_config.as_ref())?;
    let mode = parse_mode(a.mode.as_deref(), mf.mode)?;
    let n = data.n_rows();
    let batch = mf.train.batch_size.min(n);
    let steps = (mf.train.epochs * n.div_ceil(batch)) as u64;
    let q = batch as f64 / n as f64;
    let delta = a.delta.unwrap_or(1.0 / n as f64);
    let privacy = match (a.clip, a.sigma, a.target_epsilon) {
        (None, None, None) => None,
        (Some(c), Some(s), None) => Some(PrivacySpec::new(c, s, delta, q).map_err(invalid)?),
        (Some(c), None, Some(eps)) => {
            let s = dptrain::calibrate_sigma(q, steps, delta, eps, 1e-3).map_err(invalid)?;
            Some(PrivacySpec::new(c, s, delta, q).map_err(invalid)?)
        }
        _ => return Err(invalid("DP training needs --clip with one of --sigma or --target-epsilon")),
    };
    let plan = build_plan(data.schema(), groups.as_ref(), mf.config.latent_dim, mode).map_err(invalid)?;
    let mut model = GenerativeModel::new(plan, data.schema().to_vec(), mf.config, rng::derive(a.seed, "init"));
    let fit = model.fit(&data, &mf.train, privacy.as_ref(), rng::derive(a.seed, "fit")).map_err(failed)?;
    let ledger = fit.account.as_ref().map(|acc| acc.to_ledger_json());
    let mut checkpoint = model.to_checkpoint();
    checkpoint.training = Some(json!({"seed": a.seed, "train": mf.train, "privacy": ledger}));
    write(&a.out, &serde_json::to_string(&checkpoint).expect("serializes"))?;
    println!(
        "{}",
        pretty(&json!({"steps": fit.steps, "final_loss": fit.loss_curve.last(), "privacy": ledger, "plan": model.plan().describe()}))
    );
    Ok(0)
}

fn sample(a: Sample) -> Result<u8> {
    let text = read(&a.model)?;
    let checkpoint: ModelCheckpoint = serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", a.model.display())))?;
    let model = GenerativeModel::from_checkpoint(&checkpoint).map_err(invalid)?;
    let data = model.sample_synthetic(a.n, &mut rng::from_seed(rng::derive(a.seed, "sample"))).map_err(failed)?;
    dataset::save_dataset(&a.out, &data, Some(a.seed)).map_err(failed)?;
    Ok(0)
}

fn accountant(a: Accountant) -> Result<u8> {
    if a.n == 0 || a.batch == 0 || a.batch > a.n {
        return Err(invalid("need 0 < batch ≤ n"));
    }
    let q = a.batch as f64 / a.n as f64;
    let steps = (a.epochs * a.n.div_ceil(a.batch)) as u64;
    let delta = a.delta.unwrap_or(1.0 / a.n as f64);
    let sigmas = match a.target_epsilon {
        Some(eps) => vec![dptrain::calibrate_sigma(q, steps, delta, eps, 1e-3).map_err(invalid)?],
        None if a.sigma.is_empty() => return Err(invalid("give --sigma or --target-epsilon")),
        None => a.sigma.clone(),
    };
    // Every (C, σ) cell is reported; nothing is auto-selected.
    let mut cells = Vec::new();
    for &c in &a.clip {
        for &s in &sigmas {
            let spec = PrivacySpec::new(c, s, delta, q).map_err(invalid)?;
            cells.push(dptrain::account(&spec, steps).to_ledger_json());
        }
    }
    let out = if cells.len() == 1 { cells.pop().unwrap() } else { json!(cells) };
    println!("{}", pretty(&out));
    Ok(0)
}

fn run_attack(a: Attack) -> Result<u8> {
    let data = load_data(&a.data)?;
    let graph = load_groups(a.graph.as_ref())?;
    let mf = load_model_file(a.model_config.as_ref())?;
    let mode = parse_mode(a.mode.as_deref(), mf.mode)?;
    let cfg = AttackConfig {
        n_targets: a.targets,
        reps: a.reps,
        train_size: a.train_size,
        n_samples: a.samples,
        sample_size: a.sample_size,
        targets: (!a.target_rows.is_empty()).then(|| a.target_rows.clone()),
    };
    cfg.validate(data.n_rows()).map_err(invalid)?;
    let extractors = parse_extractors(&a.extractors)?;
    let classifiers = parse_classifiers(&a.classifiers)?;
    let trainer = GenerativeTrainer { mode, graph, model: mf.config, train: mf.train, dp: a.clip.zip(a.sigma) };
    let report = attack::run_attack(&data, &trainer, &cfg, &extractors, &classifiers, &Hyperparams::default(), a.seed).map_err(failed)?;
    emit(a.out.as_deref(), &pretty(&report))?;
    Ok(0)
}

fn attack_diff(a: AttackDiff) -> Result<u8> {
    let load = |p: &Path| -> Result<AttackReport> { serde_json::from_str(&read(p)?).map_err(|e| invalid(format!("{}: {e}", p.display()))) };
    let cells = attack::advantage_delta(&load(&a.a)?, &load(&a.b)?).map_err(invalid)?;
    let mean = cells.iter().map(|c| c.delta).sum::<f64>() / cells.len().max(1) as f64;
    emit(a.out.as_deref(), &pretty(&json!({"cells": cells, "mean": mean})))?;
    Ok(0)
}

fn utility_cmd(a: UtilityCmd) -> Result<u8> {
    let original = load_data(&a.original)?;
    let synthetic = load_data(&a.synthetic)?;
    let kinds = parse_classifiers(&a.classifiers)?;
    let tasks = utility::make_tasks(&original, a.tasks, rng::derive(a.seed, "tasks")).map_err(invalid)?;
    let report = utility::evaluate_utility(&original, &synthetic, &tasks, &kinds, &Hyperparams::default(), rng::derive(a.seed, "eval")).map_err(failed)?;
    let dir = run_dir(&a.dir, "utility")?;
    put(&dir, "utility.json", &pretty(&report))?;
    let mut csv = String::from("target,classifier,original,synthetic,delta\n");
    for c in &report.cells {
        csv.push_str(&format!("{},{},{:?},{:?},{:?}\n", c.target, c.classifier.name(), c.original, c.synthetic, c.delta));
    }
    put(&dir, "utility.csv", &csv)?;
    let by = report.mean_delta_by_classifier();
    let figure = svg::grouped_bars(
        "Original minus synthetic accuracy",
        &by.iter().map(|(k, _)| k.name().to_string()).collect::<Vec<_>>(),
        &["delta".to_string()],
        &[by.iter().map(|(_, d)| *d).collect()],
    );
    put(&dir, "figures/utility.svg", &figure)?;
    println!("{}", dir.path().display());
    Ok(0)
}

fn sweep(a: Sweep) -> Result<u8> {
    let graph = load_graph(&a.graph)?;
    let groups = GroupGraph::from_graph(&graph).map_err(invalid)?;
    let data = match &a.data {
        Some(p) => load_data(p)?,
        None => scg::sample_dataset(&graph, a.n, &mut rng::from_seed(rng::derive(a.seed, "data"))).map_err(failed)?,
    };
    if a.epsilons.is_empty() {
        return Err(invalid("give --epsilons"));
    }
    let mf = load_model_file(a.model_config.as_ref())?;
    let cfg = utility::SweepConfig {
        model: mf.config,
        train: mf.train,
        clip_norm: a.clip,
        n_tasks: a.tasks,
        classifiers: parse_classifiers(&a.classifiers)?,
        hp: Hyperparams::default(),
    };
    let table = utility::privacy_utility_sweep(&data, &groups, &a.epsilons, &cfg, rng::derive(a.seed, "sweep")).map_err(|e| match e {
        utility::UtilityError::UnreachableEpsilon(_) | utility::UtilityError::InsufficientCategoricalTargets { .. } => invalid(e),
        other => failed(other),
    })?;
    let dir = run_dir(&a.dir, "sweep")?;
    put(&dir, "sweep.json", &pretty(&table))?;
    put(&dir, "sweep.csv", &pipeline::sweep_csv(&table))?;
    let finite: Vec<_> = table.points.iter().filter(|p| p.epsilon.is_some()).collect();
    if !finite.is_empty() {
        let x: Vec<f64> = finite.iter().map(|p| p.epsilon.unwrap()).collect();
        let series = vec![
            ("causal".to_string(), finite.iter().map(|p| p.causal).collect()),
            ("associational".to_string(), finite.iter().map(|p| p.associational).collect()),
        ];
        put(&dir, "figures/sweep.svg", &svg::lines("Mean downstream accuracy", "epsilon", &x, &series))?;
    }
    for w in &table.non_monotone {
        eprintln!("warning: {w}");
    }
    println!("{}", dir.path().display());
    Ok(0)
}

fn pairplot(a: PairplotCmd) -> Result<u8> {
    let original = load_data(&a.original)?;
    let synthetic = load_data(&a.synthetic)?;
    let p = utility::pairplot_export(&original, &synthetic, a.attributes, a.seed).map_err(invalid)?;
    let dir = run_dir(&a.dir, "pairplot")?;
    put(&dir, "pairplot.csv", &p.csv)?;
    put(&dir, "figures/pairplot.svg", &p.svg)?;
    println!("{}", dir.path().display());
    Ok(0)
}

fn theory(a: Theory) -> Result<u8> {
    let graph = match &a.graph {
        Some(p) => LinearScg::from_json(&read(p)?).map_err(invalid)?,
        None => LinearScg::spurious(a.spurious),
    };
    let problem = ErmProblem::from_scg(&graph, &a.target, a.loss, a.lambda, a.eta_bound).map_err(invalid)?;
    let cfg = TrialConfig { laplace_scale: a.laplace_scale, probes: a.probes };
    let report = theorylab::run_theory(&problem, a.n, a.trials, &cfg, a.seed).map_err(failed)?;
    let dir = run_dir(&a.dir, "theory")?;
    put(&dir, "trials.csv", &report.records_csv())?;
    let summary = json!({
        "target": report.target,
        "loss": report.loss,
        "lambda": report.lambda,
        "rho": report.rho,
        "eta_bound": report.eta_bound,
        "n": report.n,
        "laplace_scale": report.laplace_scale,
        "trials": report.records.len(),
        "strata": report.strata,
    });
    put(&dir, "summary.json", &pretty(&summary))?;
    println!("{}", pretty(&summary));
    Ok(0)
}

fn run(a: Run) -> Result<u8> {
    let text = read(&a.manifest)?;
    let mut manifest = ExperimentManifest::from_json(&text).map_err(invalid)?;
    if a.workers.is_some() {
        manifest.workers = a.workers;
        manifest.validate().map_err(invalid)?;
    }
    let base = a.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let outcome = pipeline::run_pipeline(&manifest, &base, &a.out, &RunOptions { dry_run: a.dry_run }).map_err(|e| match e.exit_code() {
        2 => invalid(e),
        _ => failed(e),
    })?;
    if a.dry_run {
        println!("{}", manifest.to_json());
        for s in manifest.stages() {
            println!("stage {s}");
        }
        return Ok(0);
    }
    let dir = outcome.dir.expect("runs write a directory");
    println!("{}", dir.display());
    match outcome.report.status {
        RunStatus::Partial => {
            for s in outcome.report.stages.iter().filter(|s| s.error.is_some()) {
                eprintln!("stage {} failed: {}", s.name, s.error.as_deref().unwrap_or(""));
            }
            Ok(3)
        }
        _ => Ok(0),
    }
}

fn report(a: ReportCmd) -> Result<u8> {
    let r = RunReport::from_json(&read(&a.report)?).map_err(invalid)?;
    let rendered = pipeline::render_report(&r).map_err(invalid)?;
    match &a.out {
        None => print!("{}", rendered.markdown),
        Some(dir) => {
            write(&dir.join("report.md"), &rendered.markdown)?;
            for (rel, text) in &rendered.figures {
                write(&dir.join(rel), text)?;
            }
        }
    }
    Ok(0)
}

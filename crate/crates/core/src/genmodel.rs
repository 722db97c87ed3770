//! Variational autoencoders whose decoder is either a single joint factor
//! (associational) or a product of per-group factors following a causal
//! graph.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::dptrain::{self, PrivacyAccount, PrivacySpec};
use crate::ndcore::{
    self, kl_diag_gaussian, kl_diag_gaussian_grad, reparameterize_with, sigmoid, Activation, BernoulliHead,
    CategoricalHead, GaussianHead, Likelihood, Mlp, MlpCheckpoint, NdError, Optimizer, OptimizerKind,
};
use crate::rng::{self, Rng};
use crate::scg::{GroupGraph, VarKind, Variable};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("causal mode requires a graph")]
    MissingGraph,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("non-finite loss or gradient at step {0}")]
    NonFiniteLoss(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] NdError),
    #[error(transparent)]
    Privacy(#[from] dptrain::DpError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Causal,
    Associational,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Causal => "causal",
            Mode::Associational => "associational",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanGroup {
    pub name: String,
    /// Dataset column indices.
    pub columns: Vec<usize>,
}

/// `p(group | parents, [z])`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanFactor {
    pub group: usize,
    pub parents: Vec<usize>,
    pub uses_latent: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorizationPlan {
    pub mode: Mode,
    pub latent_name: String,
    pub latent_dim: usize,
    pub groups: Vec<PlanGroup>,
    /// Decoder factors in sampling order.
    pub factors: Vec<PlanFactor>,
    /// Groups whose values feed the encoder `q(z | ·)`.
    pub encoder_groups: Vec<usize>,
}

impl FactorizationPlan {
    /// Human-readable factorization, e.g. `p(z) p(X1|z) p(X2|X1,z)`.
    pub fn describe(&self) -> String {
        let z = self.latent_name.to_lowercase();
        let mut parts = vec![format!("p({z})")];
        for f in &self.factors {
            let mut cond: Vec<String> = f.parents.iter().map(|&p| self.groups[p].name.clone()).collect();
            if f.uses_latent {
                cond.push(z.clone());
            }
            let target = &self.groups[f.group].name;
            parts.push(if cond.is_empty() { format!("p({target})") } else { format!("p({target}|{})", cond.join(",")) });
        }
        let enc: Vec<&str> = self.encoder_groups.iter().map(|&g| self.groups[g].name.as_str()).collect();
        format!("{}; q({z}|{})", parts.join(" "), enc.join(","))
    }
}

/// Decoder and encoder factorization for `schema` (the observed columns).
///
/// In causal mode every latent group of `graph` is merged into the single
/// VAE latent. A graph without latent groups gets the latent as a parent of
/// every group. The encoder conditions on the latent's children.
pub fn build_plan(
    schema: &[Variable],
    graph: Option<&GroupGraph>,
    latent_dim: usize,
    mode: Mode,
) -> Result<FactorizationPlan, GenError> {
    if mode == Mode::Associational {
        let group = PlanGroup { name: "X".into(), columns: (0..schema.len()).collect() };
        return Ok(FactorizationPlan {
            mode,
            latent_name: "Z".into(),
            latent_dim,
            groups: vec![group],
            factors: vec![PlanFactor { group: 0, parents: vec![], uses_latent: true }],
            encoder_groups: vec![0],
        });
    }
    let graph = graph.ok_or(GenError::MissingGraph)?;
    let mut group_index = vec![None; graph.groups.len()];
    let mut groups = Vec::new();
    let mut covered = vec![false; schema.len()];
    for (gi, g) in graph.groups.iter().enumerate() {
        if g.latent {
            continue;
        }
        let mut columns = Vec::new();
        for m in &g.members {
            let c = schema
                .iter()
                .position(|v| &v.name == m)
                .ok_or_else(|| GenError::SchemaMismatch(format!("graph variable {m} is not a data column")))?;
            covered[c] = true;
            columns.push(c);
        }
        group_index[gi] = Some(groups.len());
        groups.push(PlanGroup { name: g.name.clone(), columns });
    }
    if let Some(c) = covered.iter().position(|&x| !x) {
        return Err(GenError::SchemaMismatch(format!("column {} is not in the graph", schema[c].name)));
    }
    let latent_groups: Vec<usize> = (0..graph.groups.len()).filter(|&g| graph.groups[g].latent).collect();
    let latent_name = match latent_groups.as_slice() {
        [] => "Z".to_string(),
        [g] => graph.groups[*g].name.clone(),
        gs => gs.iter().map(|&g| graph.groups[g].name.as_str()).collect::<Vec<_>>().join("+"),
    };
    let mut factors = Vec::new();
    for g in graph.topological_order() {
        let Some(pg) = group_index[g] else { continue };
        let pars = graph.parents(g);
        let uses_latent = latent_groups.is_empty() || pars.iter().any(|p| graph.groups[*p].latent);
        let mut parents: Vec<usize> = pars.iter().filter_map(|&p| group_index[p]).collect();
        parents.sort_unstable();
        factors.push(PlanFactor { group: pg, parents, uses_latent });
    }
    let mut encoder_groups: Vec<usize> = if latent_groups.is_empty() {
        (0..groups.len()).collect()
    } else {
        latent_groups.iter().flat_map(|&l| graph.children(l)).filter_map(|c| group_index[c]).collect()
    };
    encoder_groups.sort_unstable();
    encoder_groups.dedup();
    Ok(FactorizationPlan { mode, latent_name, latent_dim, groups, factors, encoder_groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub activation: Activation,
    /// One network per conditioning source with summed outputs, instead of
    /// one network over the concatenated conditions.
    pub product_of_experts: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: ndcore::DEFAULT_LATENT,
            hidden: ndcore::DEFAULT_HIDDEN,
            activation: Activation::Tanh,
            product_of_experts: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Latent,
    Group(usize),
}

/// Width of a value when fed to a network.
fn input_width(kind: VarKind) -> usize {
    match kind {
        VarKind::Categorical(c) => c,
        _ => 1,
    }
}

/// Width of a column's distribution parameters.
fn output_width(kind: VarKind) -> usize {
    match kind {
        VarKind::Continuous => 2,
        VarKind::Binary => 1,
        VarKind::Categorical(c) => c,
    }
}

fn push_value(out: &mut Vec<f64>, kind: VarKind, value: f64, observed: bool) {
    match kind {
        VarKind::Categorical(c) => {
            let start = out.len();
            out.resize(start + c, 0.0);
            if observed {
                out[start + value as usize] = 1.0;
            }
        }
        _ => out.push(if observed { value } else { 0.0 }),
    }
}

#[derive(Debug, Clone)]
struct Expert {
    sources: Vec<Source>,
    net: Mlp,
}

#[derive(Debug, Clone)]
pub struct GenerativeModel {
    plan: FactorizationPlan,
    schema: Vec<Variable>,
    config: ModelConfig,
    encoder: Mlp,
    decoders: Vec<Vec<Expert>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboEstimate {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
    pub batch_size: usize,
    /// Reconstruction log-likelihood per decoder factor.
    pub factor_reconstruction: Vec<f64>,
}

/// Per-example ELBO pieces and the gradient of `−ELBO`.
#[derive(Debug, Clone)]
pub struct ExampleElbo {
    pub reconstruction: f64,
    pub kl: f64,
    pub factor_reconstruction: Vec<f64>,
    pub loss_gradient: Vec<f64>,
}

impl ExampleElbo {
    pub fn elbo(&self) -> f64 {
        self.reconstruction - self.kl
    }
}

impl GenerativeModel {
    pub fn new(plan: FactorizationPlan, schema: Vec<Variable>, config: ModelConfig, seed: u64) -> Self {
        let mut r = rng::from_seed(seed);
        let group_width =
            |g: usize| plan.groups[g].columns.iter().map(|&c| input_width(schema[c].kind)).sum::<usize>();
        let enc_in: usize = plan.encoder_groups.iter().map(|&g| group_width(g) + plan.groups[g].columns.len()).sum();
        let encoder = Mlp::new(enc_in, config.hidden, 2 * plan.latent_dim, config.activation, &mut r);
        let source_width = |s: Source| match s {
            Source::Latent => plan.latent_dim,
            Source::Group(g) => group_width(g),
        };
        let decoders = plan
            .factors
            .iter()
            .map(|f| {
                let out: usize = plan.groups[f.group].columns.iter().map(|&c| output_width(schema[c].kind)).sum();
                let mut sources: Vec<Source> = f.parents.iter().map(|&p| Source::Group(p)).collect();
                if f.uses_latent {
                    sources.push(Source::Latent);
                }
                let layouts: Vec<Vec<Source>> = if config.product_of_experts && sources.len() > 1 {
                    sources.into_iter().map(|s| vec![s]).collect()
                } else {
                    vec![sources]
                };
                layouts
                    .into_iter()
                    .map(|sources| {
                        let width = sources.iter().map(|&s| source_width(s)).sum();
                        Expert { sources, net: Mlp::new(width, config.hidden, out, config.activation, &mut r) }
                    })
                    .collect()
            })
            .collect();
        Self { plan, schema, config, encoder, decoders }
    }

    pub fn plan(&self) -> &FactorizationPlan {
        &self.plan
    }

    pub fn schema(&self) -> &[Variable] {
        &self.schema
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn latent_dim(&self) -> usize {
        self.plan.latent_dim
    }

    pub fn networks(&self) -> impl Iterator<Item = &Mlp> {
        std::iter::once(&self.encoder).chain(self.decoders.iter().flatten().map(|e| &e.net))
    }

    pub fn param_count(&self) -> usize {
        self.networks().map(Mlp::param_count).sum()
    }

    /// Every parameter, encoder first then decoder factors in plan order.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.networks().flat_map(Mlp::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        std::iter::once(&mut self.encoder)
            .chain(self.decoders.iter_mut().flatten().map(|e| &mut e.net))
            .flat_map(Mlp::params_mut)
    }

    /// Sources feeding each expert of decoder factor `f`.
    pub fn expert_sources(&self, f: usize) -> Vec<Vec<Source>> {
        self.decoders[f].iter().map(|e| e.sources.clone()).collect()
    }

    fn check_schema(&self, data: &Dataset) -> Result<(), GenError> {
        if data.schema() != self.schema.as_slice() {
            return Err(GenError::SchemaMismatch("dataset schema differs from model schema".into()));
        }
        Ok(())
    }

    fn encoder_input(&self, x: &[f64], mask: &[bool]) -> Vec<f64> {
        let mut v = Vec::new();
        for &g in &self.plan.encoder_groups {
            for &c in &self.plan.groups[g].columns {
                push_value(&mut v, self.schema[c].kind, x[c], mask[c]);
            }
            for &c in &self.plan.groups[g].columns {
                v.push(if mask[c] { 1.0 } else { 0.0 });
            }
        }
        v
    }

    fn expert_input(&self, sources: &[Source], x: &[f64], mask: &[bool], z: &[f64]) -> (Vec<f64>, Option<usize>) {
        let mut v = Vec::new();
        let mut z_at = None;
        for s in sources {
            match *s {
                Source::Latent => {
                    z_at = Some(v.len());
                    v.extend_from_slice(z);
                }
                Source::Group(g) => {
                    for &c in &self.plan.groups[g].columns {
                        push_value(&mut v, self.schema[c].kind, x[c], mask[c]);
                    }
                }
            }
        }
        (v, z_at)
    }

    /// Approximate posterior `q(z | x)` for one record.
    pub fn encode(&self, x: &[f64], mask: &[bool]) -> Result<GaussianHead, GenError> {
        let (out, _) = self.encoder.forward(&self.encoder_input(x, mask))?;
        Ok(GaussianHead::from_output(&out))
    }

    /// Summed decoder output of factor `f`.
    fn factor_output(&self, f: usize, x: &[f64], mask: &[bool], z: &[f64]) -> Result<Vec<f64>, GenError> {
        let mut total: Option<Vec<f64>> = None;
        for e in &self.decoders[f] {
            let (inp, _) = self.expert_input(&e.sources, x, mask, z);
            let (out, _) = e.net.forward(&inp)?;
            match &mut total {
                None => total = Some(out),
                Some(t) => t.iter_mut().zip(&out).for_each(|(a, b)| *a += b),
            }
        }
        Ok(total.expect("every factor has at least one expert"))
    }

    /// Log-likelihood of the observed cells of group columns under the raw
    /// parameters `out`, with its gradient with respect to `out`.
    fn group_log_likelihood(&self, columns: &[usize], out: &[f64], x: &[f64], mask: &[bool]) -> (f64, Vec<f64>) {
        let mut ll = 0.0;
        let mut grad = vec![0.0; out.len()];
        let mut at = 0;
        for &c in columns {
            let kind = self.schema[c].kind;
            let w = output_width(kind);
            let o = &out[at..at + w];
            let xs = [x[c]];
            let ms = [mask[c]];
            let (l, g) = match kind {
                VarKind::Continuous => {
                    let h = GaussianHead::new(vec![o[0]], &[o[1]]);
                    (h.log_likelihood(&xs, &ms), h.log_likelihood_grad(&xs, &ms))
                }
                VarKind::Binary => {
                    let h = BernoulliHead { logits: vec![o[0]] };
                    (h.log_likelihood(&xs, &ms), h.log_likelihood_grad(&xs, &ms))
                }
                VarKind::Categorical(_) => {
                    let h = CategoricalHead { logits: o.to_vec() };
                    (h.log_likelihood(&xs, &ms), h.log_likelihood_grad(&xs, &ms))
                }
            };
            ll += l.expect("widths agree by construction");
            grad[at..at + w].copy_from_slice(&g.expect("widths agree by construction"));
            at += w;
        }
        (ll, grad)
    }

    /// `Σ_f log p(group_f | parents, z)` over observed cells.
    pub fn decoder_log_likelihood(&self, x: &[f64], mask: &[bool], z: &[f64]) -> Result<f64, GenError> {
        let mut ll = 0.0;
        for (f, factor) in self.plan.factors.iter().enumerate() {
            let out = self.factor_output(f, x, mask, z)?;
            ll += self.group_log_likelihood(&self.plan.groups[factor.group].columns, &out, x, mask).0;
        }
        Ok(ll)
    }

    /// ELBO of one record with frozen reparameterization noise (one `eps`
    /// vector per Monte Carlo sample), and the gradient of `−ELBO` with
    /// respect to every parameter in [`GenerativeModel::params`] order.
    pub fn example_elbo(&self, x: &[f64], mask: &[bool], eps: &[Vec<f64>]) -> Result<ExampleElbo, GenError> {
        assert!(!eps.is_empty(), "at least one Monte Carlo sample");
        let s = eps.len() as f64;
        let enc_in = self.encoder_input(x, mask);
        let (enc_out, enc_cache) = self.encoder.forward(&enc_in)?;
        let q = GaussianHead::from_output(&enc_out);
        let kl = kl_diag_gaussian(&q);
        let l = self.plan.latent_dim;
        let mut enc_grad = kl_diag_gaussian_grad(&q);
        let mut tapes: Vec<Vec<ndcore::GradientTape>> =
            self.decoders.iter().map(|f| f.iter().map(|e| ndcore::GradientTape::zeros_like(&e.net)).collect()).collect();
        let mut factor_reconstruction = vec![0.0; self.plan.factors.len()];
        let std = q.std();
        for e in eps {
            let z = reparameterize_with(&q, e);
            let mut dz = vec![0.0; l];
            for (f, factor) in self.plan.factors.iter().enumerate() {
                let mut caches = Vec::with_capacity(self.decoders[f].len());
                let mut total: Option<Vec<f64>> = None;
                for ex in &self.decoders[f] {
                    let (inp, z_at) = self.expert_input(&ex.sources, x, mask, &z);
                    let (out, cache) = ex.net.forward(&inp)?;
                    caches.push((cache, z_at));
                    match &mut total {
                        None => total = Some(out),
                        Some(t) => t.iter_mut().zip(&out).for_each(|(a, b)| *a += b),
                    }
                }
                let out = total.expect("every factor has at least one expert");
                let (ll, g) = self.group_log_likelihood(&self.plan.groups[factor.group].columns, &out, x, mask);
                factor_reconstruction[f] += ll / s;
                let upstream: Vec<f64> = g.iter().map(|v| -v / s).collect();
                for (k, (ex, (cache, z_at))) in self.decoders[f].iter().zip(&caches).enumerate() {
                    let (tape, dinput) = ex.net.backward(cache, &upstream)?;
                    tapes[f][k].add_assign(&tape);
                    if let Some(at) = z_at {
                        dz.iter_mut().zip(&dinput[*at..*at + l]).for_each(|(a, b)| *a += b);
                    }
                }
            }
            for j in 0..l {
                enc_grad[j] += dz[j];
                if !q.clamped[j] {
                    enc_grad[l + j] += dz[j] * std[j] * e[j];
                }
            }
        }
        let (enc_tape, _) = self.encoder.backward(&enc_cache, &enc_grad)?;
        let mut loss_gradient = Vec::with_capacity(self.param_count());
        loss_gradient.extend(enc_tape.iter());
        for f in &tapes {
            for t in f {
                loss_gradient.extend(t.iter());
            }
        }
        let reconstruction = factor_reconstruction.iter().sum();
        Ok(ExampleElbo { reconstruction, kl, factor_reconstruction, loss_gradient })
    }

    /// Reparameterization noise for `batch` records.
    pub fn draw_noise(&self, rng: &mut Rng, batch: usize, mc_samples: usize) -> Vec<Vec<Vec<f64>>> {
        (0..batch)
            .map(|_| (0..mc_samples).map(|_| (0..self.plan.latent_dim).map(|_| rng::normal(rng)).collect()).collect())
            .collect()
    }

    /// Mean ELBO over `rows` with per-example gradients of `−ELBO`.
    pub fn elbo_rows(
        &self,
        data: &Dataset,
        rows: &[usize],
        noise: &[Vec<Vec<f64>>],
    ) -> Result<(ElboEstimate, Vec<Vec<f64>>), GenError> {
        self.check_schema(data)?;
        let per = crate::par::map_range(rows.len(), |i| {
            let r = rows[i];
            self.example_elbo(data.raw_row(r), data.mask_row(r), &noise[i])
        });
        let per: Vec<ExampleElbo> = per.into_iter().collect::<Result<_, _>>()?;
        let b = rows.len().max(1) as f64;
        let nf = self.plan.factors.len();
        let factor_reconstruction: Vec<f64> =
            (0..nf).map(|f| ndcore::pairwise_sum(&per.iter().map(|p| p.factor_reconstruction[f]).collect::<Vec<_>>()) / b).collect();
        let reconstruction = ndcore::pairwise_sum(&per.iter().map(|p| p.reconstruction).collect::<Vec<_>>()) / b;
        let kl = ndcore::pairwise_sum(&per.iter().map(|p| p.kl).collect::<Vec<_>>()) / b;
        let est = ElboEstimate {
            reconstruction,
            kl,
            total: reconstruction - kl,
            batch_size: rows.len(),
            factor_reconstruction,
        };
        Ok((est, per.into_iter().map(|p| p.loss_gradient).collect()))
    }

    /// Monte Carlo ELBO of a whole batch.
    pub fn elbo(&self, batch: &Dataset, rng: &mut Rng, mc_samples: usize) -> Result<(ElboEstimate, Vec<Vec<f64>>), GenError> {
        let rows: Vec<usize> = (0..batch.n_rows()).collect();
        let noise = self.draw_noise(rng, rows.len(), mc_samples.max(1));
        self.elbo_rows(batch, &rows, &noise)
    }

    /// Draw `n` fully observed records: `z ~ N(0, I)`, then every decoder
    /// factor in plan order.
    pub fn sample_synthetic(&self, n: usize, rng: &mut Rng) -> Result<Dataset, GenError> {
        let k = self.schema.len();
        let mut values = Vec::with_capacity(n * k);
        let mask = vec![true; k];
        for _ in 0..n {
            let z: Vec<f64> = (0..self.plan.latent_dim).map(|_| rng::normal(rng)).collect();
            let mut x = vec![0.0; k];
            for (f, factor) in self.plan.factors.iter().enumerate() {
                let out = self.factor_output(f, &x, &mask, &z)?;
                let mut at = 0;
                for &c in &self.plan.groups[factor.group].columns {
                    let kind = self.schema[c].kind;
                    let w = output_width(kind);
                    let o = &out[at..at + w];
                    x[c] = match kind {
                        VarKind::Continuous => {
                            let s = o[1].clamp(ndcore::LOG_STD_MIN, ndcore::LOG_STD_MAX).exp();
                            o[0] + s * rng::normal(rng)
                        }
                        VarKind::Binary => (rng::uniform(rng) < sigmoid(o[0])) as u8 as f64,
                        VarKind::Categorical(_) => {
                            let p = CategoricalHead { logits: o.to_vec() }.probs();
                            let u = rng::uniform(rng);
                            let mut acc = 0.0;
                            let mut pick = p.len() - 1;
                            for (i, pi) in p.iter().enumerate() {
                                acc += pi;
                                if u < acc {
                                    pick = i;
                                    break;
                                }
                            }
                            pick as f64
                        }
                    };
                    at += w;
                }
            }
            values.extend_from_slice(&x);
        }
        if n == 0 {
            return Ok(Dataset::empty(self.schema.clone()));
        }
        Dataset::observed(self.schema.clone(), values).map_err(|e| GenError::SchemaMismatch(e.to_string()))
    }

    /// Train on `data`. With `privacy`, each step clips per-example
    /// gradients and adds Gaussian noise before the optimizer update.
    pub fn fit(
        &mut self,
        data: &Dataset,
        cfg: &TrainConfig,
        privacy: Option<&PrivacySpec>,
        seed: u64,
    ) -> Result<FitReport, GenError> {
        self.fit_observed(data, cfg, privacy, seed, |_, _| {})
    }

    /// [`GenerativeModel::fit`] calling `observer(step, model)` after every
    /// parameter update.
    pub fn fit_observed(
        &mut self,
        data: &Dataset,
        cfg: &TrainConfig,
        privacy: Option<&PrivacySpec>,
        seed: u64,
        mut observer: impl FnMut(usize, &GenerativeModel),
    ) -> Result<FitReport, GenError> {
        self.check_schema(data)?;
        cfg.validate()?;
        let n = data.n_rows();
        let batch = cfg.batch_size.min(n.max(1));
        let spec = match privacy {
            Some(p) => {
                p.validate()?;
                *p
            }
            None => PrivacySpec::non_private(batch as f64 / n.max(1) as f64),
        };
        let schedule = batch_schedule(n, batch, cfg.epochs, rng::derive(seed, "shuffle"));
        let mut noise_rng = rng::from_seed(rng::derive(seed, "reparam"));
        let mut dp_rng = rng::from_seed(rng::derive(seed, "dp-noise"));
        let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, self.param_count());
        let mut loss_curve = Vec::with_capacity(schedule.len());
        for (step, rows) in schedule.iter().enumerate() {
            let noise = self.draw_noise(&mut noise_rng, rows.len(), cfg.mc_samples);
            let (est, grads) = self.elbo_rows(data, rows, &noise)?;
            if !est.total.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(GenError::NonFiniteLoss(step));
            }
            loss_curve.push(-est.total);
            let g = dptrain::noisy_mean_gradient(&grads, &spec, &mut dp_rng);
            opt.apply(self.params_mut(), &g);
            observer(step, self);
        }
        let account = privacy.map(|p| dptrain::account(p, schedule.len() as u64));
        Ok(FitReport { steps: schedule.len(), loss_curve, account })
    }

    pub fn to_checkpoint(&self) -> ModelCheckpoint {
        ModelCheckpoint {
            format_version: MODEL_FORMAT_VERSION,
            plan: self.plan.clone(),
            schema: self.schema.clone(),
            config: self.config,
            encoder: self.encoder.to_checkpoint(),
            decoders: self
                .decoders
                .iter()
                .map(|f| f.iter().map(|e| ExpertCheckpoint { sources: e.sources.clone(), net: e.net.to_checkpoint() }).collect())
                .collect(),
            training: None,
        }
    }

    pub fn from_checkpoint(c: &ModelCheckpoint) -> Result<Self, GenError> {
        if c.format_version != MODEL_FORMAT_VERSION {
            return Err(GenError::Checkpoint(format!("unsupported format version {}", c.format_version)));
        }
        if c.decoders.len() != c.plan.factors.len() {
            return Err(GenError::Checkpoint("decoder count does not match plan".into()));
        }
        let decoders = c
            .decoders
            .iter()
            .map(|f| {
                f.iter()
                    .map(|e| Ok(Expert { sources: e.sources.clone(), net: Mlp::from_checkpoint(&e.net)? }))
                    .collect::<Result<Vec<_>, NdError>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            plan: c.plan.clone(),
            schema: c.schema.clone(),
            config: c.config,
            encoder: Mlp::from_checkpoint(&c.encoder)?,
            decoders,
        })
    }
}

/// Shuffled fixed-size minibatches, `⌈n/batch⌉` per epoch; the last batch
/// of an epoch may be smaller.
pub fn batch_schedule(n: usize, batch: usize, epochs: usize, seed: u64) -> Vec<Vec<usize>> {
    if n == 0 || batch == 0 {
        return Vec::new();
    }
    let mut r = rng::from_seed(seed);
    let mut out = Vec::with_capacity(epochs * n.div_ceil(batch));
    for _ in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng::shuffle(&mut r, &mut order);
        out.extend(order.chunks(batch).map(<[usize]>::to_vec));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub mc_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 100, epochs: 50, lr: ndcore::DEFAULT_LR, optimizer: OptimizerKind::adam(), mc_samples: 1 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.batch_size == 0 {
            return Err(GenError::InvalidConfig("batch size must be positive".into()));
        }
        if self.mc_samples == 0 {
            return Err(GenError::InvalidConfig("mc_samples must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(GenError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub steps: usize,
    /// Mean `−ELBO` of each step's batch, before the update.
    pub loss_curve: Vec<f64>,
    pub account: Option<PrivacyAccount>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertCheckpoint {
    pub sources: Vec<Source>,
    pub net: MlpCheckpoint,
}

/// JSON bundle of a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub plan: FactorizationPlan,
    pub schema: Vec<Variable>,
    pub config: ModelConfig,
    pub encoder: MlpCheckpoint,
    pub decoders: Vec<Vec<ExpertCheckpoint>>,
    /// Training manifest (seed, config, privacy ledger), when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<serde_json::Value>,
}

#[cfg(test)]
mod tests;

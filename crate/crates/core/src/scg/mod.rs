//! Structural causal graphs: variables, mechanisms, validation, ground-truth
//! sampling and coarsening into partial (grouped) graphs.

mod expr;
mod partial;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::rng::{self, Rng};

pub use expr::{Expr, ExprError};
pub use partial::{partial_graph, Group, GroupGraph};
pub use synthetic::{synthetic_graph, SyntheticGraphConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("cycle detected through {0:?}")]
    CycleDetected(Vec<String>),
    #[error("variable `{0}` has parents but no mechanism")]
    MissingMechanism(String),
    #[error("mechanism for `{0}` does not match its parent count")]
    ArityMismatch(String),
    #[error("duplicate variable name `{0}`")]
    DuplicateName(String),
    #[error("edge or mechanism refers to unknown variable `{0}`")]
    UnknownVariable(String),
    #[error("invalid variable `{name}`: {reason}")]
    InvalidVariable { name: String, reason: String },
    #[error("invalid mechanism for `{name}`: {reason}")]
    InvalidMechanism { name: String, reason: String },
    #[error("grouping does not assign variable `{0}`")]
    UngroupedVariable(String),
    #[error("group `{0}` mixes latent and observed variables")]
    MixedLatentGroup(String),
    #[error("grouped graph has a cycle through groups {0:?}")]
    QuotientCycle(Vec<String>),
    #[error("graph file: {0}")]
    Format(String),
}

/// Attribute type of a variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    Binary,
    Categorical(usize),
    Continuous,
}

impl VarKind {
    /// Number of categories for discrete kinds.
    pub fn cardinality(self) -> Option<usize> {
        match self {
            VarKind::Binary => Some(2),
            VarKind::Categorical(c) => Some(c),
            VarKind::Continuous => None,
        }
    }

    pub fn is_discrete(self) -> bool {
        !matches!(self, VarKind::Continuous)
    }
}

/// Distribution of a variable's exogenous noise `η`.
#[derive(Debug, Clone, PartialEq)]
pub enum Noise {
    None,
    Gaussian { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    Bernoulli { p: f64 },
    Categorical { probs: Vec<f64> },
}

impl Noise {
    fn validate(&self) -> Result<(), String> {
        let ok = match self {
            Noise::None => true,
            Noise::Gaussian { mean, std } => mean.is_finite() && std.is_finite() && *std >= 0.0,
            Noise::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            Noise::Bernoulli { p } => (0.0..=1.0).contains(p),
            Noise::Categorical { probs } => {
                !probs.is_empty()
                    && probs.iter().all(|p| p.is_finite() && *p >= 0.0)
                    && (probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid noise parameters {self:?}"))
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            Noise::None => 0.0,
            Noise::Gaussian { mean, std } => mean + std * rng::normal(rng),
            Noise::Uniform { low, high } => low + (high - low) * rng::uniform(rng),
            Noise::Bernoulli { p } => f64::from(u8::from(rng::uniform(rng) < *p)),
            Noise::Categorical { probs } => categorical_draw(probs, rng) as f64,
        }
    }
}

pub(crate) fn categorical_draw(probs: &[f64], rng: &mut Rng) -> usize {
    let u = rng::uniform(rng);
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// One attribute of a record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VariableSpec", into = "VariableSpec")]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    pub noise: Noise,
    /// Latent variables take part in sampling but are not emitted as columns.
    pub latent: bool,
}

impl Variable {
    pub fn new(name: impl Into<String>, kind: VarKind, noise: Noise) -> Self {
        Self { name: name.into(), kind, noise, latent: false }
    }

    pub fn continuous(name: impl Into<String>) -> Self {
        Self::new(name, VarKind::Continuous, Noise::Gaussian { mean: 0.0, std: 1.0 })
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Self::new(name, VarKind::Binary, Noise::Bernoulli { p: 0.5 })
    }

    pub fn categorical(name: impl Into<String>, cardinality: usize) -> Self {
        let probs = vec![1.0 / cardinality as f64; cardinality];
        Self::new(name, VarKind::Categorical(cardinality), Noise::Categorical { probs })
    }

    pub fn latent(mut self) -> Self {
        self.latent = true;
        self
    }

    fn validate(&self) -> Result<(), GraphError> {
        let bad = |reason: String| GraphError::InvalidVariable { name: self.name.clone(), reason };
        if self.name.is_empty() || self.name.contains(',') || self.name.trim() != self.name {
            return Err(bad("names must be non-empty without commas or surrounding spaces".into()));
        }
        if let VarKind::Categorical(c) = self.kind {
            if c < 2 {
                return Err(bad(format!("categorical cardinality {c} < 2")));
            }
        }
        self.noise.validate().map_err(bad)?;
        let compatible = match (&self.kind, &self.noise) {
            (VarKind::Continuous, Noise::None | Noise::Gaussian { .. } | Noise::Uniform { .. }) => true,
            (VarKind::Binary, Noise::Bernoulli { .. }) => true,
            (VarKind::Binary, Noise::Categorical { probs }) => probs.len() == 2,
            (VarKind::Categorical(c), Noise::Categorical { probs }) => probs.len() == *c,
            _ => false,
        };
        if !compatible {
            return Err(bad(format!("noise {:?} is not valid for kind {:?}", self.noise, self.kind)));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct NoiseSpec {
    family: String,
    #[serde(default)]
    params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct VariableSpec {
    name: String,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cardinality: Option<usize>,
    noise: NoiseSpec,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    latent: bool,
}

impl TryFrom<VariableSpec> for Variable {
    type Error = String;

    fn try_from(s: VariableSpec) -> Result<Self, String> {
        let kind = match (s.kind.as_str(), s.cardinality) {
            ("binary", None | Some(2)) => VarKind::Binary,
            ("categorical", Some(c)) => VarKind::Categorical(c),
            ("categorical", None) => return Err(format!("`{}`: categorical needs cardinality", s.name)),
            ("continuous", None) => VarKind::Continuous,
            (k, _) => return Err(format!("`{}`: unsupported kind/cardinality `{k}`", s.name)),
        };
        let p = &s.noise.params;
        let arity = |n: usize| {
            if p.len() == n {
                Ok(())
            } else {
                Err(format!("`{}`: noise family `{}` takes {n} params", s.name, s.noise.family))
            }
        };
        let noise = match s.noise.family.as_str() {
            "none" => Noise::None,
            "gaussian" => {
                arity(2)?;
                Noise::Gaussian { mean: p[0], std: p[1] }
            }
            "uniform" => {
                arity(2)?;
                Noise::Uniform { low: p[0], high: p[1] }
            }
            "bernoulli" => {
                arity(1)?;
                Noise::Bernoulli { p: p[0] }
            }
            "categorical" => Noise::Categorical { probs: p.clone() },
            f => return Err(format!("`{}`: unknown noise family `{f}`", s.name)),
        };
        Ok(Variable { name: s.name, kind, noise, latent: s.latent })
    }
}

impl From<Variable> for VariableSpec {
    fn from(v: Variable) -> Self {
        let (kind, cardinality) = match v.kind {
            VarKind::Binary => ("binary", None),
            VarKind::Categorical(c) => ("categorical", Some(c)),
            VarKind::Continuous => ("continuous", None),
        };
        let (family, params) = match v.noise {
            Noise::None => ("none", vec![]),
            Noise::Gaussian { mean, std } => ("gaussian", vec![mean, std]),
            Noise::Uniform { low, high } => ("uniform", vec![low, high]),
            Noise::Bernoulli { p } => ("bernoulli", vec![p]),
            Noise::Categorical { probs } => ("categorical", probs),
        };
        VariableSpec {
            name: v.name,
            kind: kind.into(),
            cardinality,
            noise: NoiseSpec { family: family.into(), params },
            latent: v.latent,
        }
    }
}

/// Generative mechanism `f*_i` for one variable, applied to its parents in
/// graph variable order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", content = "params", rename_all = "kebab-case")]
pub enum Mechanism {
    /// `w·pa + b + N(0, noise_std²)`; continuous children.
    LinearGaussian { weights: Vec<f64>, bias: f64, noise_std: f64 },
    /// `Bernoulli(sigmoid(w·pa + b))`; binary children.
    LogisticBernoulli { weights: Vec<f64>, bias: f64 },
    /// Conditional probability table over discrete parents; rows indexed in
    /// mixed radix with the first parent most significant.
    TableCpd { rows: Vec<Vec<f64>> },
    /// Arithmetic over parent names plus `eta`, the variable's noise draw.
    CustomExpression { expr: String },
}

impl Mechanism {
    /// A zero-arity mechanism that always emits `value`.
    pub fn constant(value: f64) -> Self {
        Mechanism::LinearGaussian { weights: vec![], bias: value, noise_std: 0.0 }
    }
}

/// Directed acyclic graph over variables with per-variable mechanisms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CausalGraph {
    pub variables: Vec<Variable>,
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub mechanisms: BTreeMap<String, Mechanism>,
}

enum Compiled {
    Root,
    Linear { weights: Vec<f64>, bias: f64, noise_std: f64 },
    Logistic { weights: Vec<f64>, bias: f64 },
    Table { rows: Vec<Vec<f64>>, radices: Vec<usize> },
    Custom { expr: Expr, names: Vec<String> },
}

impl CausalGraph {
    pub fn new(
        variables: Vec<Variable>,
        edges: Vec<(String, String)>,
        mechanisms: BTreeMap<String, Mechanism>,
    ) -> Self {
        Self { variables, edges, mechanisms }
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        serde_json::from_str(text).map_err(|e| GraphError::Format(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    /// Parent indices of `child`, in variable order.
    pub fn parents(&self, child: usize) -> Vec<usize> {
        let name = &self.variables[child].name;
        let set: BTreeSet<usize> = self
            .edges
            .iter()
            .filter(|(_, c)| c == name)
            .filter_map(|(p, _)| self.index_of(p))
            .collect();
        set.into_iter().collect()
    }

    fn edge_indices(&self) -> Result<BTreeSet<(usize, usize)>, GraphError> {
        let mut seen = BTreeSet::new();
        for v in &self.variables {
            if !seen.insert(v.name.as_str()) {
                return Err(GraphError::DuplicateName(v.name.clone()));
            }
        }
        self.edges
            .iter()
            .map(|(p, c)| {
                let pi = self.index_of(p).ok_or_else(|| GraphError::UnknownVariable(p.clone()))?;
                let ci = self.index_of(c).ok_or_else(|| GraphError::UnknownVariable(c.clone()))?;
                Ok((pi, ci))
            })
            .collect()
    }

    /// Check structure and mechanisms; returns a topological order of names.
    pub fn validate(&self) -> Result<Vec<String>, GraphError> {
        let order = self.topological_indices()?;
        for name in self.mechanisms.keys() {
            if self.index_of(name).is_none() {
                return Err(GraphError::UnknownVariable(name.clone()));
            }
        }
        for v in &self.variables {
            v.validate()?;
        }
        self.compile()?;
        Ok(order.into_iter().map(|i| self.variables[i].name.clone()).collect())
    }

    fn topological_indices(&self) -> Result<Vec<usize>, GraphError> {
        let edges = self.edge_indices()?;
        let k = self.variables.len();
        let names: Vec<&str> = self.variables.iter().map(|v| v.name.as_str()).collect();
        topo_sort(k, &edges).map_err(|cycle| {
            GraphError::CycleDetected(cycle.into_iter().map(|i| names[i].to_string()).collect())
        })
    }

    fn compile(&self) -> Result<Vec<Compiled>, GraphError> {
        (0..self.variables.len()).map(|i| self.compile_one(i)).collect()
    }

    fn compile_one(&self, i: usize) -> Result<Compiled, GraphError> {
        let var = &self.variables[i];
        let parents = self.parents(i);
        let bad = |reason: &str| GraphError::InvalidMechanism { name: var.name.clone(), reason: reason.into() };
        let arity = || GraphError::ArityMismatch(var.name.clone());
        let Some(mech) = self.mechanisms.get(&var.name) else {
            return if parents.is_empty() {
                Ok(Compiled::Root)
            } else {
                Err(GraphError::MissingMechanism(var.name.clone()))
            };
        };
        match mech {
            Mechanism::LinearGaussian { weights, bias, noise_std } => {
                if var.kind != VarKind::Continuous {
                    return Err(bad("linear-gaussian requires a continuous variable"));
                }
                if weights.len() != parents.len() {
                    return Err(arity());
                }
                if !weights.iter().chain([bias, noise_std]).all(|w| w.is_finite()) || *noise_std < 0.0 {
                    return Err(bad("weights must be finite and noise_std >= 0"));
                }
                Ok(Compiled::Linear { weights: weights.clone(), bias: *bias, noise_std: *noise_std })
            }
            Mechanism::LogisticBernoulli { weights, bias } => {
                if var.kind != VarKind::Binary {
                    return Err(bad("logistic-bernoulli requires a binary variable"));
                }
                if weights.len() != parents.len() {
                    return Err(arity());
                }
                if !weights.iter().chain([bias]).all(|w| w.is_finite()) {
                    return Err(bad("weights must be finite"));
                }
                Ok(Compiled::Logistic { weights: weights.clone(), bias: *bias })
            }
            Mechanism::TableCpd { rows } => {
                let card = var.kind.cardinality().ok_or_else(|| bad("table-cpd requires a discrete variable"))?;
                let mut radices = Vec::with_capacity(parents.len());
                for &p in &parents {
                    let c = self.variables[p]
                        .kind
                        .cardinality()
                        .ok_or_else(|| bad("table-cpd parents must be discrete"))?;
                    radices.push(c);
                }
                let expected: usize = radices.iter().product();
                if rows.len() != expected {
                    return Err(arity());
                }
                for row in rows {
                    if row.len() != card {
                        return Err(bad("table row length must equal the variable's cardinality"));
                    }
                    if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                        return Err(bad("table rows must be probability vectors summing to 1"));
                    }
                }
                Ok(Compiled::Table { rows: rows.clone(), radices })
            }
            Mechanism::CustomExpression { expr } => {
                if var.kind != VarKind::Continuous {
                    return Err(bad("custom-expression requires a continuous variable"));
                }
                let parsed = Expr::parse(expr).map_err(|e| bad(&e.to_string()))?;
                let names: Vec<String> = parents.iter().map(|&p| self.variables[p].name.clone()).collect();
                for id in parsed.identifiers() {
                    if id != "eta" && !names.contains(&id) {
                        return Err(arity());
                    }
                }
                Ok(Compiled::Custom { expr: parsed, names })
            }
        }
    }

    /// Indices of observed (non-latent) variables, in variable order.
    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.variables.len()).filter(|&i| !self.variables[i].latent).collect()
    }

    pub fn observed_schema(&self) -> Vec<Variable> {
        self.observed_indices().into_iter().map(|i| self.variables[i].clone()).collect()
    }
}

/// Kahn's algorithm with smallest-index tie breaking; on failure returns the
/// nodes of one directed cycle.
pub(crate) fn topo_sort(k: usize, edges: &BTreeSet<(usize, usize)>) -> Result<Vec<usize>, Vec<usize>> {
    let mut indeg = vec![0usize; k];
    let mut children = vec![Vec::new(); k];
    for &(p, c) in edges {
        indeg[c] += 1;
        children[p].push(c);
    }
    let mut ready: BTreeSet<usize> = (0..k).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(k);
    while let Some(&i) = ready.iter().next() {
        ready.remove(&i);
        order.push(i);
        for &c in &children[i] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() == k {
        return Ok(order);
    }
    // Every leftover node has a leftover predecessor; walk backwards until a
    // node repeats.
    let leftover: BTreeSet<usize> = (0..k).filter(|i| !order.contains(i)).collect();
    let mut pred = vec![usize::MAX; k];
    for &(p, c) in edges {
        if leftover.contains(&p) && leftover.contains(&c) && pred[c] == usize::MAX {
            pred[c] = p;
        }
    }
    let mut seen = vec![false; k];
    let mut cur = *leftover.iter().next().expect("leftover nonempty");
    while !seen[cur] {
        seen[cur] = true;
        cur = pred[cur];
    }
    let start = cur;
    let mut cycle = vec![start];
    let mut node = pred[start];
    while node != start {
        cycle.push(node);
        node = pred[node];
    }
    cycle.reverse();
    Err(cycle)
}

/// Draw `n` records from the graph's mechanisms in topological order.
pub fn sample_dataset(graph: &CausalGraph, n: usize, rng: &mut Rng) -> Result<Dataset, GraphError> {
    graph.validate()?;
    let order = graph.topological_indices()?;
    let compiled = graph.compile()?;
    let parents: Vec<Vec<usize>> = (0..graph.variables.len()).map(|i| graph.parents(i)).collect();
    let observed = graph.observed_indices();
    let k = graph.variables.len();
    let mut values = Vec::with_capacity(n * observed.len());
    let mut record = vec![0.0; k];
    let mut env: BTreeMap<&str, f64> = BTreeMap::new();
    for _ in 0..n {
        for &i in &order {
            let var = &graph.variables[i];
            let pa = &parents[i];
            record[i] = match &compiled[i] {
                Compiled::Root => var.noise.sample(rng),
                Compiled::Linear { weights, bias, noise_std } => {
                    let mean = bias + dot_parents(weights, pa, &record);
                    if *noise_std > 0.0 {
                        mean + noise_std * rng::normal(rng)
                    } else {
                        mean
                    }
                }
                Compiled::Logistic { weights, bias } => {
                    let logit = bias + dot_parents(weights, pa, &record);
                    let p = 1.0 / (1.0 + (-logit).exp());
                    f64::from(u8::from(rng::uniform(rng) < p))
                }
                Compiled::Table { rows, radices } => {
                    let mut row = 0usize;
                    for (&p, &r) in pa.iter().zip(radices) {
                        row = row * r + record[p] as usize;
                    }
                    categorical_draw(&rows[row], rng) as f64
                }
                Compiled::Custom { expr, names } => {
                    env.clear();
                    for (name, &p) in names.iter().zip(pa) {
                        env.insert(name.as_str(), record[p]);
                    }
                    let eta = var.noise.sample(rng);
                    env.insert("eta", eta);
                    let v = expr
                        .eval(&env)
                        .map_err(|e| GraphError::InvalidMechanism { name: var.name.clone(), reason: e.to_string() })?;
                    if !v.is_finite() {
                        return Err(GraphError::InvalidMechanism {
                            name: var.name.clone(),
                            reason: "expression produced a non-finite value".into(),
                        });
                    }
                    v
                }
            };
        }
        values.extend(observed.iter().map(|&i| record[i]));
    }
    Ok(Dataset::observed(graph.observed_schema(), values).expect("sampled values satisfy the schema"))
}

fn dot_parents(weights: &[f64], parents: &[usize], record: &[f64]) -> f64 {
    weights.iter().zip(parents).map(|(w, &p)| w * record[p]).sum()
}

/// Hide each observed cell independently with probability `missing_rate`,
/// redrawing a row's pattern whenever it would hide every cell.
pub fn mask_at_random(data: &Dataset, missing_rate: f64, rng: &mut Rng) -> Dataset {
    assert!((0.0..1.0).contains(&missing_rate), "missing_rate must lie in [0, 1)");
    let k = data.n_cols();
    let mut mask = data.mask().to_vec();
    if missing_rate == 0.0 || k == 0 {
        return data.clone();
    }
    for i in 0..data.n_rows() {
        let old = &data.mask()[i * k..(i + 1) * k];
        if !old.iter().any(|&m| m) {
            continue;
        }
        loop {
            let row: Vec<bool> = old.iter().map(|&m| m && rng::uniform(rng) >= missing_rate).collect();
            if row.iter().any(|&m| m) {
                mask[i * k..(i + 1) * k].copy_from_slice(&row);
                break;
            }
        }
    }
    data.with_mask(mask)
}

#[cfg(test)]
mod tests;

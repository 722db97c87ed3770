use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{CausalGraph, Mechanism, Noise, VarKind, Variable};
use crate::rng;

/// Parameters of the seeded random linear-Gaussian + logistic graph used as a
/// reproducible stand-in benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticGraphConfig {
    pub k: usize,
    pub continuous: usize,
    pub edge_prob: f64,
    pub max_parents: usize,
    pub seed: u64,
}

impl Default for SyntheticGraphConfig {
    fn default() -> Self {
        Self { k: 22, continuous: 2, edge_prob: 0.3, max_parents: 3, seed: 0 }
    }
}

/// Random DAG in index order. Continuous nodes get linear-Gaussian
/// mechanisms, binary nodes logistic ones with biases chosen to keep both
/// classes common.
pub fn synthetic_graph(cfg: &SyntheticGraphConfig) -> CausalGraph {
    let mut r = rng::from_seed(rng::derive(cfg.seed, "synthetic-graph"));
    let k = cfg.k;
    let continuous_at: Vec<usize> = (0..cfg.continuous.min(k)).map(|j| j * k / cfg.continuous.max(1)).collect();
    let width = k.to_string().len().max(2);
    let names: Vec<String> = (0..k).map(|i| format!("x{:0width$}", i + 1)).collect();
    let mut variables = Vec::with_capacity(k);
    let mut edges = Vec::new();
    let mut mechanisms = BTreeMap::new();
    for i in 0..k {
        let continuous = continuous_at.contains(&i);
        let var = if continuous {
            Variable::new(&names[i], VarKind::Continuous, Noise::Gaussian { mean: 0.0, std: 1.0 })
        } else {
            Variable::new(&names[i], VarKind::Binary, Noise::Bernoulli { p: 0.5 })
        };
        let mut parents: Vec<usize> = (0..i).filter(|_| rng::uniform(&mut r) < cfg.edge_prob).collect();
        while parents.len() > cfg.max_parents {
            let drop = rng::index(&mut r, parents.len());
            parents.remove(drop);
        }
        if !parents.is_empty() {
            let scale = 1.0 / (parents.len() as f64).sqrt();
            let mut weights = Vec::with_capacity(parents.len());
            let mut offset = 0.0;
            for &p in &parents {
                let sign = if rng::uniform(&mut r) < 0.5 { -1.0 } else { 1.0 };
                let w = if continuous {
                    sign * (0.5 + 0.5 * rng::uniform(&mut r)) * scale
                } else {
                    sign * (1.5 + 1.5 * rng::uniform(&mut r)) * scale
                };
                // Parent means: 0 for continuous, 1/2 for binary.
                if variables.get(p).is_some_and(|v: &Variable| v.kind == VarKind::Binary) {
                    offset += 0.5 * w;
                }
                weights.push(w);
                edges.push((names[p].clone(), names[i].clone()));
            }
            let jitter = 0.3 * (2.0 * rng::uniform(&mut r) - 1.0);
            let mech = if continuous {
                Mechanism::LinearGaussian { weights, bias: -offset, noise_std: 0.5 }
            } else {
                Mechanism::LogisticBernoulli { weights, bias: -offset + jitter }
            };
            mechanisms.insert(names[i].clone(), mech);
        }
        variables.push(var);
    }
    CausalGraph::new(variables, edges, mechanisms)
}

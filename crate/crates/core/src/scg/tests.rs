use std::collections::BTreeMap;

use proptest::prelude::*;

use super::*;

fn e(p: &str, c: &str) -> (String, String) {
    (p.to_string(), c.to_string())
}

fn chain3() -> CausalGraph {
    let mut m = BTreeMap::new();
    m.insert("X2".into(), Mechanism::LinearGaussian { weights: vec![1.0], bias: 0.0, noise_std: 1.0 });
    m.insert("X3".into(), Mechanism::LinearGaussian { weights: vec![1.0], bias: 0.0, noise_std: 1.0 });
    CausalGraph::new(
        vec![Variable::continuous("X1"), Variable::continuous("X2"), Variable::continuous("X3")],
        vec![e("X1", "X2"), e("X2", "X3")],
        m,
    )
}

#[test]
fn empty_graph_has_empty_order() {
    assert_eq!(CausalGraph::default().validate().unwrap(), Vec::<String>::new());
}

#[test]
fn chain_order() {
    assert_eq!(chain3().validate().unwrap(), vec!["X1", "X2", "X3"]);
}

#[test]
fn two_cycle_is_detected() {
    let g = CausalGraph::new(
        vec![Variable::continuous("X1"), Variable::continuous("X2")],
        vec![e("X1", "X2"), e("X2", "X1")],
        BTreeMap::new(),
    );
    match g.validate() {
        Err(GraphError::CycleDetected(mut names)) => {
            names.sort();
            assert_eq!(names, vec!["X1", "X2"]);
        }
        other => panic!("expected cycle, got {other:?}"),
    }
}

#[test]
fn cycle_diagnostic_excludes_downstream_nodes() {
    let g = CausalGraph::new(
        vec![Variable::continuous("A"), Variable::continuous("B"), Variable::continuous("C"), Variable::continuous("D")],
        vec![e("A", "B"), e("B", "C"), e("C", "B"), e("C", "D")],
        BTreeMap::new(),
    );
    let Err(GraphError::CycleDetected(mut names)) = g.validate() else { panic!() };
    names.sort();
    assert_eq!(names, vec!["B", "C"]);
}

#[test]
fn missing_mechanism_and_arity() {
    let mut g = chain3();
    g.mechanisms.remove("X3");
    assert_eq!(g.validate(), Err(GraphError::MissingMechanism("X3".into())));
    let mut g = chain3();
    g.mechanisms.insert("X3".into(), Mechanism::LinearGaussian { weights: vec![1.0, 2.0], bias: 0.0, noise_std: 1.0 });
    assert_eq!(g.validate(), Err(GraphError::ArityMismatch("X3".into())));
    let mut g = chain3();
    g.mechanisms.insert("X3".into(), Mechanism::CustomExpression { expr: "X1 + eta".into() });
    assert_eq!(g.validate(), Err(GraphError::ArityMismatch("X3".into())));
    let mut g = chain3();
    g.edges.push(e("X1", "Nope"));
    assert_eq!(g.validate(), Err(GraphError::UnknownVariable("Nope".into())));
}

#[test]
fn table_cpd_rows_must_sum_to_one() {
    let mut m = BTreeMap::new();
    m.insert("B".into(), Mechanism::TableCpd { rows: vec![vec![0.5, 0.5], vec![0.3, 0.6]] });
    let g = CausalGraph::new(vec![Variable::binary("A"), Variable::binary("B")], vec![e("A", "B")], m);
    assert!(matches!(g.validate(), Err(GraphError::InvalidMechanism { .. })));
}

#[test]
fn categorical_cardinality_must_be_at_least_two() {
    let mut v = Variable::categorical("C", 2);
    v.kind = VarKind::Categorical(1);
    v.noise = Noise::Categorical { probs: vec![1.0] };
    let g = CausalGraph::new(vec![v], vec![], BTreeMap::new());
    assert!(matches!(g.validate(), Err(GraphError::InvalidVariable { .. })));
}

#[test]
fn constant_roots_give_identical_records() {
    let mut m = BTreeMap::new();
    m.insert("a".into(), Mechanism::constant(1.25));
    m.insert("b".into(), Mechanism::constant(-3.0));
    let g = CausalGraph::new(vec![Variable::continuous("a"), Variable::continuous("b")], vec![], m);
    let d = sample_dataset(&g, 5, &mut rng::from_seed(1)).unwrap();
    assert_eq!(d.n_rows(), 5);
    for i in 0..5 {
        assert_eq!(d.raw_row(i), &[1.25, -3.0]);
    }
}

#[test]
fn linear_gaussian_chain_moments() {
    // X1 ~ N(0,1), X2 = 2 X1 + N(0, 0.1²)  =>  E[X2] = 0, Var[X2] = 4.01.
    let mut m = BTreeMap::new();
    m.insert("X2".into(), Mechanism::LinearGaussian { weights: vec![2.0], bias: 0.0, noise_std: 0.1 });
    let g = CausalGraph::new(vec![Variable::continuous("X1"), Variable::continuous("X2")], vec![e("X1", "X2")], m);
    let n = 100_000;
    let d = sample_dataset(&g, n, &mut rng::from_seed(42)).unwrap();
    let x2 = d.column(1);
    let mean = x2.iter().sum::<f64>() / n as f64;
    let var = x2.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let se_mean = (4.01 / n as f64).sqrt();
    let se_var = 4.01 * (2.0 / (n - 1) as f64).sqrt();
    assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
    assert!((var - 4.01).abs() < 3.0 * se_var, "var {var}");
}

#[test]
fn synthetic_configuration_shape() {
    let g = synthetic_graph(&SyntheticGraphConfig::default());
    let d = sample_dataset(&g, 1000, &mut rng::from_seed(0)).unwrap();
    assert_eq!((d.n_rows(), d.n_cols()), (1000, 22));
    assert!(d.is_fully_observed());
    let binary = g.variables.iter().filter(|v| v.kind == VarKind::Binary).count();
    assert_eq!(binary, 20);
}

#[test]
fn sampling_is_bitwise_reproducible() {
    let g = synthetic_graph(&SyntheticGraphConfig { seed: 5, ..Default::default() });
    let a = sample_dataset(&g, 300, &mut rng::from_seed(11)).unwrap();
    let b = sample_dataset(&g, 300, &mut rng::from_seed(11)).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.content_hash(), b.content_hash());
}

#[test]
fn latent_variables_are_not_emitted() {
    let mut m = BTreeMap::new();
    m.insert("X".into(), Mechanism::LinearGaussian { weights: vec![1.0], bias: 0.0, noise_std: 0.0 });
    let g = CausalGraph::new(
        vec![Variable::continuous("Z").latent(), Variable::continuous("X")],
        vec![e("Z", "X")],
        m,
    );
    let d = sample_dataset(&g, 3, &mut rng::from_seed(0)).unwrap();
    assert_eq!(d.n_cols(), 1);
    assert_eq!(d.schema()[0].name, "X");
}

#[test]
fn table_and_expression_mechanisms() {
    let mut m = BTreeMap::new();
    m.insert("C".into(), Mechanism::TableCpd { rows: vec![vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]] });
    m.insert("Y".into(), Mechanism::CustomExpression { expr: "2 * C + eta".into() });
    let mut y = Variable::continuous("Y");
    y.noise = Noise::None;
    let g = CausalGraph::new(
        vec![Variable::binary("A"), Variable::categorical("C", 3), y],
        vec![e("A", "C"), e("C", "Y")],
        m,
    );
    let d = sample_dataset(&g, 200, &mut rng::from_seed(3)).unwrap();
    for i in 0..200 {
        let r = d.raw_row(i);
        assert_eq!(r[1], if r[0] == 0.0 { 0.0 } else { 2.0 });
        assert_eq!(r[2], 2.0 * r[1]);
    }
}

#[test]
fn child_mechanism_is_invariant_to_root_intervention() {
    // Modularity: P(B=1 | A=a) does not depend on the marginal of A.
    let build = |p: f64| {
        let mut m = BTreeMap::new();
        m.insert("B".into(), Mechanism::LogisticBernoulli { weights: vec![2.0], bias: -1.0 });
        let mut a = Variable::binary("A");
        a.noise = Noise::Bernoulli { p };
        CausalGraph::new(vec![a, Variable::binary("B")], vec![e("A", "B")], m)
    };
    let cond = |g: &CausalGraph, seed| {
        let d = sample_dataset(g, 40_000, &mut rng::from_seed(seed)).unwrap();
        let mut counts = [[0usize; 2]; 2];
        for i in 0..d.n_rows() {
            let r = d.raw_row(i);
            counts[r[0] as usize][r[1] as usize] += 1;
        }
        counts.map(|c| (c[1] as f64 / (c[0] + c[1]) as f64, (c[0] + c[1]) as f64))
    };
    let lo = cond(&build(0.2), 1);
    let hi = cond(&build(0.8), 2);
    for a in 0..2 {
        let (p1, n1) = lo[a];
        let (p2, n2) = hi[a];
        let se = (p1 * (1.0 - p1) / n1 + p2 * (1.0 - p2) / n2).sqrt();
        assert!((p1 - p2).abs() < 4.0 * se, "a={a}: {p1} vs {p2}");
    }
}

#[test]
fn mask_rate_zero_is_identity() {
    let g = synthetic_graph(&SyntheticGraphConfig::default());
    let d = sample_dataset(&g, 50, &mut rng::from_seed(0)).unwrap();
    assert_eq!(mask_at_random(&d, 0.0, &mut rng::from_seed(1)), d);
}

#[test]
fn mask_rate_concentrates() {
    let schema: Vec<Variable> = (0..10).map(|j| Variable::continuous(format!("v{j}"))).collect();
    let d = Dataset::observed(schema, vec![0.0; 10_000]).unwrap();
    let m = mask_at_random(&d, 0.3, &mut rng::from_seed(7));
    let f = m.observed_fraction();
    assert!((0.67..=0.73).contains(&f), "observed fraction {f}");
}

#[test]
fn extreme_mask_rate_keeps_one_cell() {
    let schema = vec![Variable::continuous("a"), Variable::continuous("b")];
    let d = Dataset::observed(schema, vec![1.0; 200]).unwrap();
    let m = mask_at_random(&d, 0.999, &mut rng::from_seed(9));
    for i in 0..m.n_rows() {
        assert!(m.mask_row(i).iter().any(|&x| x));
    }
    assert!(m.observed_fraction() < 0.6);
}

#[test]
fn identity_grouping_is_isomorphic() {
    let g = chain3();
    let gg = GroupGraph::from_graph(&g).unwrap();
    assert_eq!(gg.groups.len(), 3);
    let expected: std::collections::BTreeSet<_> = g.edges.iter().cloned().collect();
    assert_eq!(gg.named_edges(), expected);
}

#[test]
fn pain_style_coarsening() {
    let names = ["Z", "c1", "c2", "d1", "d2"];
    let mut vars: Vec<Variable> = names.iter().map(|n| Variable::binary(*n)).collect();
    vars[0] = Variable::continuous("Z").latent();
    let edges = vec![
        e("Z", "c1"),
        e("Z", "c2"),
        e("Z", "d1"),
        e("Z", "d2"),
        e("c1", "d1"),
        e("c2", "d1"),
        e("c2", "d2"),
    ];
    let g = CausalGraph::new(vars, edges, BTreeMap::new());
    let grouping: BTreeMap<String, String> = [("Z", "Z"), ("c1", "X1"), ("c2", "X1"), ("d1", "X2"), ("d2", "X2")]
        .iter()
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect();
    let pg = partial_graph(&g, &grouping).unwrap();
    assert_eq!(pg.groups.len(), 3);
    assert!(pg.groups[pg.index_of("Z").unwrap()].latent);
    let expected: std::collections::BTreeSet<_> = [e("Z", "X1"), e("Z", "X2"), e("X1", "X2")].into_iter().collect();
    assert_eq!(pg.named_edges(), expected);
}

#[test]
fn merging_across_an_intermediate_is_a_quotient_cycle() {
    let g = chain3();
    let grouping: BTreeMap<String, String> =
        [("X1", "G"), ("X2", "H"), ("X3", "G")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    assert!(matches!(partial_graph(&g, &grouping), Err(GraphError::QuotientCycle(_))));
}

#[test]
fn graph_file_round_trip() {
    let text = r#"{
        "variables": [
            {"name": "a", "kind": "continuous", "noise": {"family": "gaussian", "params": [0, 1]}},
            {"name": "b", "kind": "binary", "noise": {"family": "bernoulli", "params": [0.5]}},
            {"name": "c", "kind": "categorical", "cardinality": 3, "noise": {"family": "categorical", "params": [0.2, 0.3, 0.5]}}
        ],
        "edges": [["a", "b"]],
        "mechanisms": {"b": {"form": "logistic-bernoulli", "params": {"weights": [1.5], "bias": 0.0}}}
    }"#;
    let g = CausalGraph::from_json(text).unwrap();
    assert_eq!(g.validate().unwrap(), vec!["a", "b", "c"]);
    assert_eq!(g.variables[2].kind, VarKind::Categorical(3));
    let back = CausalGraph::from_json(&g.to_json()).unwrap();
    assert_eq!(back, g);
}

proptest! {
    #[test]
    fn permuted_variables_still_validate(seed in 0u64..1000, perm_seed in 0u64..1000) {
        let g = synthetic_graph(&SyntheticGraphConfig { k: 8, seed, ..Default::default() });
        let mut vars = g.variables.clone();
        rng::shuffle(&mut rng::from_seed(perm_seed), &mut vars);
        let permuted = CausalGraph::new(vars, g.edges.clone(), g.mechanisms.clone());
        let order = permuted.validate().unwrap();
        let pos = |n: &str| order.iter().position(|x| x == n).unwrap();
        for (p, c) in &g.edges {
            prop_assert!(pos(p) < pos(c));
        }
        prop_assert_eq!(order.len(), 8);
    }
}

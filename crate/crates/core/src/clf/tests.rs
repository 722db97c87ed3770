use proptest::prelude::*;

use super::*;

/// Two Gaussian-ish blobs separated by a margin along the first axis.
fn blobs(n: usize, seed: u64, gap: f64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut r = rng::from_seed(seed);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..n {
        let c = i % 2;
        let sign = if c == 1 { 1.0 } else { -1.0 };
        let a = sign * (gap + rng::uniform(&mut r));
        let b = 2.0 * rng::uniform(&mut r) - 1.0;
        x.push(vec![a, b]);
        y.push(c);
    }
    (x, y)
}

#[test]
fn separable_blobs_are_learned_by_every_kind() {
    let (x, y) = blobs(60, 1, 0.5);
    for kind in ClassifierKind::ALL {
        let c = fit(kind, &x, &y, &Hyperparams::default(), 3).unwrap();
        let rep = c.evaluate(&x, &y).unwrap();
        assert_eq!(rep.accuracy, 100.0, "{kind}");
    }
}

#[test]
fn constant_labels_give_flagged_constant_classifier() {
    let (x, _) = blobs(10, 2, 0.5);
    let y = vec![1; 10];
    for kind in ClassifierKind::ALL {
        let c = fit(kind, &x, &y, &Hyperparams::default(), 0).unwrap();
        assert!(c.is_degenerate());
        assert_eq!(c.evaluate(&x, &y).unwrap().accuracy, 100.0);
    }
}

#[test]
fn one_nearest_neighbour_memorizes() {
    let mut r = rng::from_seed(4);
    let x: Vec<Vec<f64>> = (0..50).map(|_| vec![rng::normal(&mut r), rng::normal(&mut r), rng::normal(&mut r)]).collect();
    let y: Vec<usize> = (0..50).map(|_| rng::index(&mut r, 3)).collect();
    let c = fit(ClassifierKind::Knn, &x, &y, &Hyperparams { k: 1, ..Default::default() }, 0).unwrap();
    assert_eq!(c.predict(&x).unwrap(), y);
}

#[test]
fn empty_prediction_and_shape_errors() {
    let (x, y) = blobs(20, 5, 0.5);
    let c = fit(ClassifierKind::Logistic, &x, &y, &Hyperparams::default(), 0).unwrap();
    assert!(c.predict(&[]).unwrap().is_empty());
    assert!(matches!(c.predict(&[vec![1.0]]), Err(ClfError::ShapeMismatch(_))));
    assert!(matches!(fit(ClassifierKind::Knn, &x, &y[..3], &Hyperparams::default(), 0), Err(ClfError::ShapeMismatch(_))));
}

#[test]
fn vanishing_gamma_predicts_majority() {
    let mut r = rng::from_seed(6);
    let x: Vec<Vec<f64>> = (0..40).map(|_| vec![rng::normal(&mut r), rng::normal(&mut r)]).collect();
    let y: Vec<usize> = (0..40).map(|i| usize::from(i % 4 != 0)).collect();
    let hp = Hyperparams { gamma: Some(1e-9), ..Default::default() };
    let c = fit(ClassifierKind::KernelSvm, &x, &y, &hp, 0).unwrap();
    let probe: Vec<Vec<f64>> = (0..20).map(|_| vec![5.0 * rng::normal(&mut r), 5.0 * rng::normal(&mut r)]).collect();
    assert!(c.predict(&probe).unwrap().iter().all(|&p| p == 1));
}

/// Exhaustive search over midpoints for the minimum weighted Gini split.
fn brute_force_split(x: &[f64], y: &[usize]) -> f64 {
    let mut vals: Vec<f64> = x.to_vec();
    vals.sort_by(f64::total_cmp);
    vals.dedup();
    let mut best = (f64::INFINITY, f64::NAN);
    for w in vals.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let side = |left: bool| {
            let ys: Vec<usize> = x.iter().zip(y).filter(|(v, _)| (**v <= t) == left).map(|(_, c)| *c).collect();
            let n = ys.len() as f64;
            let p = ys.iter().filter(|&&c| c == 1).count() as f64 / n;
            (n, 1.0 - p * p - (1.0 - p) * (1.0 - p))
        };
        let (nl, gl) = side(true);
        let (nr, gr) = side(false);
        let score = (nl * gl + nr * gr) / (nl + nr);
        if score < best.0 {
            best = (score, t);
        }
    }
    best.1
}

#[test]
fn stump_matches_exhaustive_split() {
    for seed in 0..10 {
        let mut r = rng::from_seed(seed);
        let x: Vec<f64> = (0..40).map(|_| rng::normal(&mut r)).collect();
        let y: Vec<usize> = x.iter().map(|&v| usize::from(v + 0.8 * rng::normal(&mut r) > 0.2)).collect();
        let rows: Vec<Vec<f64>> = x.iter().map(|&v| vec![v]).collect();
        let hp = Hyperparams { n_trees: 1, max_depth: 1, bootstrap: false, ..Default::default() };
        let c = fit(ClassifierKind::RandomForest, &rows, &y, &hp, seed).unwrap();
        let Fitted::Forest { trees } = &c.fitted else { panic!() };
        match &trees[0] {
            Node::Split { threshold, .. } => assert_eq!(*threshold, brute_force_split(&x, &y)),
            Node::Leaf(_) => panic!("expected a split"),
        }
    }
}

#[test]
fn fitting_is_deterministic() {
    let (x, y) = blobs(50, 7, 0.0);
    for kind in ClassifierKind::ALL {
        let a = fit(kind, &x, &y, &Hyperparams::default(), 11).unwrap();
        let b = fit(kind, &x, &y, &Hyperparams::default(), 11).unwrap();
        assert_eq!(a, b, "{kind}");
    }
}

#[test]
fn multiclass_one_vs_rest() {
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut r = rng::from_seed(8);
    for i in 0..90 {
        let c = i % 3;
        let centre = [(0.0, 4.0), (4.0, -2.0), (-4.0, -2.0)][c];
        x.push(vec![centre.0 + 0.5 * rng::normal(&mut r), centre.1 + 0.5 * rng::normal(&mut r)]);
        y.push(c);
    }
    for kind in ClassifierKind::ALL {
        let c = fit(kind, &x, &y, &Hyperparams::default(), 1).unwrap();
        assert!(c.evaluate(&x, &y).unwrap().accuracy >= 95.0, "{kind}");
    }
}

fn direction(c: &Classifier) -> Vec<f64> {
    let Fitted::Linear { scaler, models } = &c.fitted else { panic!() };
    // Normal in raw feature coordinates.
    let w: Vec<f64> = models[0].w.iter().zip(&scaler.std).map(|(w, s)| w / s).collect();
    let n = w.iter().map(|v| v * v).sum::<f64>().sqrt();
    w.iter().map(|v| v / n).collect()
}

#[test]
fn duplicated_margin_point_keeps_boundary() {
    // Overlapping classes keep the regularized optimum finite.
    let (x, y) = blobs(80, 9, -0.3);
    for kind in [ClassifierKind::Logistic, ClassifierKind::LinearSvm] {
        let base = fit(kind, &x, &y, &Hyperparams::default(), 0).unwrap();
        let d0 = direction(&base);
        // The most confidently classified training point, duplicated. The
        // scaler is refitted on the augmented data, so compare directions
        // in raw coordinates.
        let Fitted::Linear { scaler, models } = &base.fitted else { panic!() };
        let margin = |i: usize| {
            let s = models[0].score(&scaler.apply(&x[i]));
            if y[i] == 1 { s } else { -s }
        };
        let best = (0..x.len()).max_by(|&a, &b| margin(a).total_cmp(&margin(b))).unwrap();
        assert!(margin(best) > 1.0);
        let mut x2 = x.clone();
        let mut y2 = y.clone();
        x2.push(x[best].clone());
        y2.push(y[best]);
        let dup = fit(kind, &x2, &y2, &Hyperparams::default(), 0).unwrap();
        let cos: f64 = d0.iter().zip(direction(&dup)).map(|(a, b)| a * b).sum();
        assert!(cos > 1.0 - 1e-3, "{kind}: cos {cos}");
    }
}

#[test]
fn report_examples() {
    let truth = vec![1, 1, 0, 0];
    let perfect = EvalReport::from_predictions(&truth, &truth);
    assert_eq!((perfect.accuracy, perfect.pa(), perfect.na()), (100.0, 100.0, 100.0));
    let all_in = EvalReport::from_predictions(&[1, 1, 1, 1], &truth);
    assert_eq!((all_in.accuracy, all_in.pa(), all_in.na()), (50.0, 100.0, 0.0));
    let r = EvalReport::from_predictions(&[1, 0, 0, 1, 1, 0], &[1, 1, 0, 0, 1, 0]).rounded();
    assert_eq!(r.accuracy, 66.67);
}

proptest! {
    #[test]
    fn weighted_recall_reproduces_accuracy(
        pairs in proptest::collection::vec((0usize..3, 0usize..3), 1..60),
    ) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let r = EvalReport::from_predictions(&pred, &truth);
        let weighted: f64 = r.per_class.iter().map(|(_, rec, s)| rec * *s as f64).sum::<f64>() / r.n as f64;
        prop_assert!((weighted - r.accuracy).abs() < 1e-9);
        prop_assert!((0.0..=100.0).contains(&r.accuracy));
        let flipped: Vec<usize> = truth.iter().map(|t| 1 - t.min(&1)).collect();
        let binary_pred: Vec<usize> = pred.iter().map(|p| *p.min(&1)).collect();
        let a = EvalReport::from_predictions(&binary_pred, &truth.iter().map(|t| *t.min(&1)).collect::<Vec<_>>());
        let b = EvalReport::from_predictions(&binary_pred, &flipped);
        prop_assert!((a.accuracy + b.accuracy - 100.0).abs() < 1e-9);
    }

    #[test]
    fn knn_is_permutation_invariant(seed in 0u64..500) {
        let mut r = rng::from_seed(seed);
        let x: Vec<Vec<f64>> = (0..30).map(|_| vec![rng::index(&mut r, 4) as f64, rng::index(&mut r, 4) as f64]).collect();
        let y: Vec<usize> = (0..30).map(|_| rng::index(&mut r, 2)).collect();
        let mut perm: Vec<usize> = (0..30).collect();
        rng::shuffle(&mut r, &mut perm);
        let xp: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let a = fit(ClassifierKind::Knn, &x, &y, &Hyperparams::default(), 0).unwrap();
        let b = fit(ClassifierKind::Knn, &xp, &yp, &Hyperparams::default(), 0).unwrap();
        let probe: Vec<Vec<f64>> = (0..16).map(|i| vec![(i % 4) as f64, (i / 4) as f64]).collect();
        prop_assert_eq!(a.predict(&probe).unwrap(), b.predict(&probe).unwrap());
    }
}

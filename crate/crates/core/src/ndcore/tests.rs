use proptest::prelude::*;

use super::*;

fn net(act: Activation, seed: u64) -> Mlp {
    Mlp::new(4, 6, 3, act, &mut rng::from_seed(seed))
}

/// Central finite differences of `f` around every parameter.
fn fd_param_grad(net: &Mlp, f: impl Fn(&Mlp) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let n = net.param_count();
    (0..n)
        .map(|i| {
            let mut plus = net.clone();
            *plus.params_mut().nth(i).unwrap() += h;
            let mut minus = net.clone();
            *minus.params_mut().nth(i).unwrap() -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

#[test]
fn backward_matches_finite_differences() {
    for act in [Activation::Tanh, Activation::Relu, Activation::Identity] {
        let m = net(act, 1);
        let x = [0.3, -0.7, 1.1, 0.05];
        let up = [0.5, -1.0, 2.0];
        let (_, cache) = m.forward(&x).unwrap();
        let (tape, dx) = m.backward(&cache, &up).unwrap();
        let obj = |n: &Mlp| dot(&n.forward(&x).unwrap().0, &up);
        let fd = fd_param_grad(&m, obj);
        for (a, b) in tape.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{act:?}: {a} vs {b}");
        }
        for j in 0..4 {
            let mut xp = x;
            xp[j] += 1e-6;
            let mut xm = x;
            xm[j] -= 1e-6;
            let fd = (dot(&m.forward(&xp).unwrap().0, &up) - dot(&m.forward(&xm).unwrap().0, &up)) / 2e-6;
            assert!((dx[j] - fd).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}

#[test]
fn zero_weights_output_biases() {
    let mut m = net(Activation::Tanh, 2);
    let n = m.param_count();
    let b3_len = 3;
    for (i, p) in m.params_mut().enumerate() {
        *p = if i >= n - b3_len { (i - (n - b3_len)) as f64 } else { 0.0 };
    }
    let (out, _) = m.forward(&[9.0, 9.0, 9.0, 9.0]).unwrap();
    assert_eq!(out, vec![0.0, 1.0, 2.0]);
}

#[test]
fn stale_cache_is_rejected() {
    let mut m = net(Activation::Tanh, 3);
    let (_, cache) = m.forward(&[0.0; 4]).unwrap();
    *m.params_mut().next().unwrap() += 0.1;
    assert_eq!(m.backward(&cache, &[1.0; 3]).unwrap_err(), NdError::StaleCache);
    let other = net(Activation::Tanh, 3);
    let (_, cache) = other.forward(&[0.0; 4]).unwrap();
    assert_eq!(m.backward(&cache, &[1.0; 3]).unwrap_err(), NdError::StaleCache);
}

#[test]
fn shape_errors() {
    let m = net(Activation::Tanh, 4);
    assert!(matches!(m.forward(&[0.0; 3]), Err(NdError::ShapeMismatch { .. })));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let m = net(Activation::Relu, 5);
    let json = serde_json::to_string(&m.to_checkpoint()).unwrap();
    let back = Mlp::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
    for (a, b) in m.params().zip(back.params()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    let mut c = m.to_checkpoint();
    c.format_version = 99;
    assert!(Mlp::from_checkpoint(&c).is_err());
}

#[test]
fn gaussian_density_integrates_to_one() {
    // Trapezoidal quadrature of exp(log-likelihood) over ±12σ.
    for (mu, raw) in [(0.0, 0.0), (1.5, -1.0), (-3.0, 1.2)] {
        let head = GaussianHead::new(vec![mu], &[raw]);
        let s = head.std()[0];
        let steps = 20_000;
        let (lo, hi) = (mu - 12.0 * s, mu + 12.0 * s);
        let dx = (hi - lo) / steps as f64;
        let total: f64 = (0..=steps)
            .map(|i| {
                let x = lo + i as f64 * dx;
                let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
                w * head.log_likelihood(&[x], &[true]).unwrap().exp()
            })
            .sum::<f64>()
            * dx;
        assert!((total - 1.0).abs() < 1e-6, "{total}");
    }
}

#[test]
fn log_std_clamp_zeroes_gradient() {
    let head = GaussianHead::new(vec![0.0, 0.0], &[7.0, -9.0]);
    assert_eq!(head.log_std, vec![LOG_STD_MAX, LOG_STD_MIN]);
    let g = head.log_likelihood_grad(&[1.0, 1.0], &[true, true]).unwrap();
    assert_eq!(&g[2..], &[0.0, 0.0]);
    assert_eq!(&kl_diag_gaussian_grad(&head)[2..], &[0.0, 0.0]);
}

#[test]
fn head_gradients_match_finite_differences() {
    let out = [0.4, -1.2, 0.3, -0.5];
    let x = [1.0, -0.2];
    let mask = [true, true];
    let ll = |o: &[f64]| GaussianHead::from_output(o).log_likelihood(&x, &mask).unwrap();
    let g = GaussianHead::from_output(&out).log_likelihood_grad(&x, &mask).unwrap();
    for j in 0..4 {
        let mut p = out;
        p[j] += 1e-6;
        let mut m = out;
        m[j] -= 1e-6;
        let fd = (ll(&p) - ll(&m)) / 2e-6;
        assert!((g[j] - fd).abs() < 1e-6, "gaussian {j}");
    }
    let kl = |o: &[f64]| kl_diag_gaussian(&GaussianHead::from_output(o));
    let g = kl_diag_gaussian_grad(&GaussianHead::from_output(&out));
    for j in 0..4 {
        let mut p = out;
        p[j] += 1e-6;
        let mut m = out;
        m[j] -= 1e-6;
        assert!((g[j] - (kl(&p) - kl(&m)) / 2e-6).abs() < 1e-6, "kl {j}");
    }
    let logits = [0.3, -2.0, 1.0];
    let b = BernoulliHead { logits: logits.to_vec() };
    let xb = [1.0, 0.0, 1.0];
    let g = b.log_likelihood_grad(&xb, &[true; 3]).unwrap();
    for j in 0..3 {
        let f = |d: f64| {
            let mut l = logits;
            l[j] += d;
            BernoulliHead { logits: l.to_vec() }.log_likelihood(&xb, &[true; 3]).unwrap()
        };
        assert!((g[j] - (f(1e-6) - f(-1e-6)) / 2e-6).abs() < 1e-6, "bernoulli {j}");
    }
    let c = CategoricalHead { logits: logits.to_vec() };
    let g = c.log_likelihood_grad(&[2.0], &[true]).unwrap();
    for j in 0..3 {
        let f = |d: f64| {
            let mut l = logits;
            l[j] += d;
            CategoricalHead { logits: l.to_vec() }.log_likelihood(&[2.0], &[true]).unwrap()
        };
        assert!((g[j] - (f(1e-6) - f(-1e-6)) / 2e-6).abs() < 1e-6, "categorical {j}");
    }
}

#[test]
fn kl_matches_monte_carlo() {
    let q = GaussianHead::new(vec![0.7, -0.4, 1.1], &[-0.3, 0.2, -1.0]);
    let mut r = rng::from_seed(17);
    let n = 200_000;
    let std_normal = GaussianHead::new(vec![0.0; 3], &[0.0; 3]);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let (z, _) = reparameterize(&q, &mut r);
        let v = q.log_likelihood(&z, &[true; 3]).unwrap() - std_normal.log_likelihood(&z, &[true; 3]).unwrap();
        sum += v;
        sum_sq += v * v;
    }
    let mean = sum / n as f64;
    let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
    let exact = kl_diag_gaussian(&q);
    assert!((mean - exact).abs() < 4.0 * se, "{mean} vs {exact} (se {se})");
}

#[test]
fn masked_coordinates_do_not_contribute() {
    let head = GaussianHead::new(vec![0.0, 5.0], &[0.0, 0.0]);
    let a = head.log_likelihood(&[0.1, 100.0], &[true, false]).unwrap();
    let b = head.log_likelihood(&[0.1, -7.0], &[true, false]).unwrap();
    assert_eq!(a, b);
    let b = BernoulliHead { logits: vec![1.0, 1.0] };
    assert_eq!(b.log_likelihood(&[1.0, 0.0], &[false, false]).unwrap(), 0.0);
}

#[test]
fn sgd_step_is_plain_gradient_descent() {
    let mut p = vec![1.0, -2.0];
    let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.1, 2);
    opt.apply(p.iter_mut(), &[0.5, -1.0]);
    assert_eq!(p, vec![0.95, -1.9]);
}

#[test]
fn adam_minimizes_quadratic() {
    let mut p = vec![3.0, -4.0];
    let mut opt = Optimizer::new(OptimizerKind::adam(), 0.05, 2);
    for _ in 0..2000 {
        let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
        opt.apply(p.iter_mut(), &g);
    }
    assert!(p.iter().all(|x| x.abs() < 1e-3), "{p:?}");
}

#[test]
fn pairwise_sum_matches_naive() {
    let xs: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
    assert!((pairwise_sum(&xs) - xs.iter().sum::<f64>()).abs() < 1e-10);
}

proptest! {
    #[test]
    fn kl_is_nonnegative_and_zero_at_prior(
        mean in proptest::collection::vec(-5.0f64..5.0, 1..6),
        seed in 0u64..100,
    ) {
        let mut r = rng::from_seed(seed);
        let raw: Vec<f64> = mean.iter().map(|_| 4.0 * rng::uniform(&mut r) - 2.0).collect();
        let q = GaussianHead::new(mean.clone(), &raw);
        prop_assert!(kl_diag_gaussian(&q) >= 0.0);
        let prior = GaussianHead::new(vec![0.0; mean.len()], &vec![0.0; mean.len()]);
        prop_assert_eq!(kl_diag_gaussian(&prior), 0.0);
    }

    #[test]
    fn bernoulli_log_likelihood_is_nonpositive(l in -30.0f64..30.0, x in 0u8..2) {
        let b = BernoulliHead { logits: vec![l] };
        prop_assert!(b.log_likelihood(&[x as f64], &[true]).unwrap() <= 0.0);
    }
}

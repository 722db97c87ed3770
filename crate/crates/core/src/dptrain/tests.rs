use proptest::prelude::*;

use super::*;
use crate::rng::Rng;

/// `log ∫ exp(f(x)) dx` by the trapezoidal rule on `[lo, hi]`.
fn log_integral(f: impl Fn(f64) -> f64, lo: f64, hi: f64, steps: usize) -> f64 {
    let dx = (hi - lo) / steps as f64;
    let vals: Vec<f64> = (0..=steps).map(|i| f(lo + i as f64 * dx)).collect();
    let m = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = vals
        .iter()
        .enumerate()
        .map(|(i, v)| if i == 0 || i == steps { 0.5 } else { 1.0 } * (v - m).exp())
        .sum();
    m + (s * dx).ln()
}

fn log_normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI).ln() - sigma.ln() - 0.5 * ((x - mu) / sigma).powi(2)
}

fn log_mixture(x: f64, q: f64, sigma: f64) -> f64 {
    let a = (1.0 - q).ln() + log_normal_pdf(x, 0.0, sigma);
    let b = q.ln() + log_normal_pdf(x, 1.0, sigma);
    if q == 1.0 {
        return b;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `(D_α(mixture ‖ N(0,σ²)), D_α(N(0,σ²) ‖ mixture))` by quadrature.
fn quadrature_rdp(q: f64, sigma: f64, alpha: u32) -> (f64, f64) {
    let a = alpha as f64;
    let (lo, hi) = (-15.0 * sigma - a, a + 1.0 + 15.0 * sigma);
    let steps = 200_000;
    let fwd = log_integral(|x| a * log_mixture(x, q, sigma) + (1.0 - a) * log_normal_pdf(x, 0.0, sigma), lo, hi, steps);
    let rev = log_integral(|x| a * log_normal_pdf(x, 0.0, sigma) + (1.0 - a) * log_mixture(x, q, sigma), lo, hi, steps);
    (fwd / (a - 1.0), rev / (a - 1.0))
}

#[test]
fn full_batch_matches_gaussian_closed_form() {
    let v = rdp_subsampled_gaussian(1.0, 1.0, 2).unwrap();
    assert!((v - 1.0).abs() < 1e-9, "{v}");
    for (sigma, alpha) in [(0.7, 3u32), (2.0, 10), (5.0, 64)] {
        let v = rdp_subsampled_gaussian(1.0, sigma, alpha).unwrap();
        let exact = alpha as f64 / (2.0 * sigma * sigma);
        assert!((v - exact).abs() < 1e-9 * exact.max(1.0));
    }
}

#[test]
fn zero_sampling_rate_is_free() {
    assert_eq!(rdp_subsampled_gaussian(0.0, 1.0, 8).unwrap(), 0.0);
}

#[test]
fn formula_bounds_quadrature_on_grid() {
    let mut checked = 0;
    for q in [0.01, 0.05, 0.1, 0.5, 1.0] {
        for sigma in [0.8, 1.0, 2.0, 4.0] {
            for alpha in [2u32, 4, 8] {
                let f = rdp_subsampled_gaussian(q, sigma, alpha).unwrap();
                let (fwd, rev) = quadrature_rdp(q, sigma, alpha);
                let tol = 1e-7 * f.abs().max(1e-3);
                assert!(f + tol >= fwd && f + tol >= rev, "q={q} σ={sigma} α={alpha}: {f} vs {fwd}, {rev}");
                // The integer-order expansion is exact for the forward direction.
                assert!((f - fwd).abs() <= 1e-6 * f.abs().max(1e-6), "q={q} σ={sigma} α={alpha}: {f} vs {fwd}");
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 60);
}

#[test]
fn zero_steps_zero_epsilon() {
    let spec = PrivacySpec::new(1.0, 1.0, 1e-3, 0.1).unwrap();
    assert_eq!(account(&spec, 0).epsilon, 0.0);
}

#[test]
fn more_noise_less_epsilon() {
    let a = account(&PrivacySpec::new(1.0, 1.0, 1e-3, 0.1).unwrap(), 500);
    let b = account(&PrivacySpec::new(1.0, 2.0, 1e-3, 0.1).unwrap(), 500);
    assert!(b.epsilon <= a.epsilon);
    for (x, y) in a.rdp_values.iter().zip(&b.rdp_values) {
        assert!(y <= x);
    }
}

#[test]
fn composition_is_additive() {
    let spec = PrivacySpec::new(1.0, 1.3, 1e-5, 0.05).unwrap();
    let whole = account(&spec, 700);
    let parts = account(&spec, 300).compose(&account(&spec, 400));
    assert!((whole.epsilon - parts.epsilon).abs() <= 1e-12 * whole.epsilon);
    assert_eq!(whole.best_order, parts.best_order);
}

#[test]
fn calibration_hits_synthetic_budget() {
    let (n, batch, steps) = (1000usize, 100usize, 500u64);
    let q = batch as f64 / n as f64;
    let delta = 1.0 / n as f64;
    let sigma = calibrate_sigma(q, steps, delta, 3.9, 1e-3).unwrap();
    let eps = account(&PrivacySpec::new(1.0, sigma, delta, q).unwrap(), steps).epsilon;
    assert!((eps - 3.9).abs() <= 0.05, "sigma {sigma} gives {eps}");
}

#[test]
fn spec_validation() {
    assert!(PrivacySpec::new(f64::INFINITY, 1.0, 1e-3, 0.1).is_err());
    assert!(PrivacySpec::new(f64::INFINITY, 0.0, 1e-3, 0.1).is_ok());
    assert!(PrivacySpec::new(1.0, 1.0, 0.0, 0.1).is_err());
    assert!(PrivacySpec::new(1.0, 1.0, 1e-3, 1.5).is_err());
    assert!(PrivacySpec::new(0.0, 1.0, 1e-3, 0.5).is_err());
}

#[test]
fn clipping_examples() {
    assert_eq!(clip_gradient(&[2.0, 0.0], 1.0), vec![1.0, 0.0]);
    let g = [1.2, -1.6];
    assert_eq!(clip_gradient(&g, 1.0), vec![0.6, -0.8]);
    assert_eq!(clip_gradient(&[0.3, 0.0], 1.0), vec![0.3, 0.0]);
}

#[test]
fn noiseless_unclipped_step_is_plain_sgd() {
    let grads = vec![vec![0.1, -0.3, 2.0], vec![0.5, 0.25, -1.0], vec![-0.7, 0.05, 0.0]];
    let mut p = vec![1.0, 2.0, 3.0];
    let mut reference = p.clone();
    let mean = pairwise_vec_sum(&grads);
    for (r, g) in reference.iter_mut().zip(&mean) {
        *r -= 0.1 * (g / 3.0);
    }
    dp_step(p.iter_mut(), &grads, &PrivacySpec::non_private(0.1), 0.1, &mut rng::from_seed(0));
    for (a, b) in p.iter().zip(&reference) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn identical_tapes_at_clip_norm() {
    let g = vec![0.6, 0.8];
    let spec = PrivacySpec::new(1.0, 0.0, 1e-3, 0.1).unwrap();
    let mut p = vec![0.0, 0.0];
    dp_step(p.iter_mut(), &vec![g.clone(); 4], &spec, 0.5, &mut rng::from_seed(0));
    assert!((p[0] + 0.3).abs() < 1e-15 && (p[1] + 0.4).abs() < 1e-15);
}

#[test]
fn noise_scale_matches_sigma_c_over_batch() {
    let spec = PrivacySpec::new(1.0, 1.0, 1e-3, 0.1).unwrap();
    let batch = 4;
    let zeros = vec![vec![0.0]; batch];
    let mut r = rng::from_seed(99);
    let n = 100_000;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let mut p = [0.0];
        dp_step(p.iter_mut(), &zeros, &spec, 1.0, &mut r);
        sum_sq += p[0] * p[0];
    }
    let std = (sum_sq / n as f64).sqrt();
    let expected = 1.0 / batch as f64;
    assert!((std / expected - 1.0).abs() < 0.01, "{std} vs {expected}");
}

#[test]
fn laplace_scale_by_mle() {
    let mut r = rng::from_seed(5);
    let n = 1_000_000;
    let mle = |r: &mut Rng, dh: f64| {
        let bound = SensitivityBound { delta_h: dh, norm: Norm::L1 };
        (0..n).map(|_| laplace_output_perturb(&[0.0], bound, 1.0, r)[0].abs()).sum::<f64>() / n as f64
    };
    let b1 = mle(&mut r, 1.0);
    assert!((b1 - 1.0).abs() < 0.01, "{b1}");
    let b2 = mle(&mut r, 2.0);
    assert!((b2 / b1 - 2.0).abs() < 0.04, "{b2} / {b1}");
    let zero = SensitivityBound { delta_h: 0.0, norm: Norm::L2 };
    assert_eq!(laplace_output_perturb(&[1.5, -2.0], zero, 1.0, &mut r), vec![1.5, -2.0]);
}

#[test]
fn ledger_json_fields() {
    let acc = account(&PrivacySpec::new(1.0, 1.1, 1e-3, 0.1).unwrap(), 10);
    let v = acc.to_ledger_json();
    for k in ["C", "sigma", "q", "T", "delta", "orders", "rdp", "epsilon", "sampling_assumption"] {
        assert!(v.get(k).is_some(), "missing {k}");
    }
    assert_eq!(v["sampling_assumption"], "poisson-approx");
}

proptest! {
    #[test]
    fn clip_bounds_norm_and_keeps_direction(g in proptest::collection::vec(-10.0f64..10.0, 1..20), c in 0.01f64..5.0) {
        let out = clip_gradient(&g, c);
        let n_in = l2_norm(&g);
        let n_out = l2_norm(&out);
        prop_assert!(n_out <= c + 1e-12);
        if n_in > 1e-9 {
            let cos = g.iter().zip(&out).map(|(a, b)| a * b).sum::<f64>() / (n_in * n_out);
            prop_assert!((cos - 1.0).abs() < 1e-12);
        }
        prop_assert_eq!(clip_gradient(&out, c), out.clone());
    }

    #[test]
    fn noiseless_aggregate_is_order_independent(
        tapes in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 5), 1..12),
        seed in 0u64..1000,
    ) {
        let spec = PrivacySpec::new(1.0, 0.0, 1e-3, 0.1).unwrap();
        let a = noisy_mean_gradient(&tapes, &spec, &mut rng::from_seed(0));
        let mut shuffled = tapes.clone();
        rng::shuffle(&mut rng::from_seed(seed), &mut shuffled);
        let b = noisy_mean_gradient(&shuffled, &spec, &mut rng::from_seed(0));
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn epsilon_monotone_in_steps_and_rate(t in 1u64..2000, q in 0.001f64..0.5, sigma in 0.5f64..5.0) {
        let at = |t, q| account(&PrivacySpec::new(1.0, sigma, 1e-5, q).unwrap(), t).epsilon;
        prop_assert!(at(t, q) <= at(t + 1, q) + 1e-12);
        prop_assert!(at(t, q) <= at(t, (q * 1.5).min(1.0)) + 1e-12);
    }
}

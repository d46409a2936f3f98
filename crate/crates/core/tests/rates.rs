use mvsde_core::geometry::Domain;
use mvsde_core::metrics::w1_1d;
use mvsde_core::model::BuiltinModel;
use mvsde_core::particle::{init_ensemble, Sampler};
use mvsde_core::rates::{
    build_h_transform, corollary44_k, ex0_bound, fit_rate, fixed_point_invariant, harris_rate, kappa1,
    lemma33_constants, lemma33_kq, FixedPointParams, RateSource,
};
use proptest::prelude::*;

proptest! {
    #[test]
    fn h_inverse_undoes_h(r in 0.0f64..50.0) {
        let ht = build_h_transform(|r| (1.0 + r) * (1.0 + r), 50.0, 501).unwrap();
        prop_assert!((ht.h_inv(ht.h(r)) - r).abs() <= 1e-8 * r.max(1.0));
    }

    #[test]
    fn h_inverse_clamps_at_zero(s in -1e6f64..=0.0) {
        let ht = build_h_transform(|r| 1.0 + r, 10.0, 101).unwrap();
        prop_assert_eq!(ht.h_inv(s), 0.0);
    }

    #[test]
    fn harris_rate_is_positive(alpha in 1e-3f64..=1.0, beta in 0.0f64..1.999, t0 in 1e-3f64..10.0, t1 in 1e-3f64..10.0) {
        prop_assume!(alpha * alpha * (2.0 - beta) < 2.0);
        let h = harris_rate(alpha, beta, t0, t1).unwrap();
        prop_assert!(h.lambda > 0.0);
        prop_assert!(h.delta > 0.0 && h.delta < 1.0);
    }

    #[test]
    fn kappa1_scales_like_sqrt_lambda(c in 1.01f64..20.0, lambda in 0.01f64..100.0) {
        let scaled = kappa1(c, lambda).unwrap().value;
        let unit = kappa1(c, 1.0).unwrap().value;
        prop_assert!((scaled - lambda.sqrt() * unit).abs() <= 1e-8 * scaled.max(1.0));
    }

    #[test]
    fn ex0_is_non_increasing_in_time(v in 1.0f64..100.0, k in 1.01f64..10.0, lambda in 0.01f64..5.0) {
        let ht = build_h_transform(|r| (1.0 + r) * (1.0 + r), 200.0, 2001).unwrap();
        let mut last = f64::INFINITY;
        for i in 0..100 {
            let b = ex0_bound(&ht, v, k, lambda, 0.1 * i as f64).unwrap();
            prop_assert!(b <= last * (1.0 + 1e-12));
            last = b;
        }
    }

    #[test]
    fn fit_recovers_exact_exponentials(c in 0.1f64..10.0, lambda in 0.1f64..5.0) {
        let t: Vec<f64> = (0..40).map(|i| 0.05 * i as f64).collect();
        let v: Vec<f64> = t.iter().map(|t| c * (-lambda * t).exp()).collect();
        let cert = fit_rate(&t, &v, 0.0).unwrap();
        prop_assert!((cert.lambda - lambda).abs() <= 1e-10 * lambda);
        prop_assert!((cert.c - c).abs() <= 1e-10 * c);
    }
}

#[test]
fn ex0_identity_and_clamp() {
    let ht = build_h_transform(|r| (1.0 + r) * (1.0 + r), 100.0, 1001).unwrap();
    assert_eq!(ex0_bound(&ht, 4.0, 3.0, 0.7, 0.0).unwrap(), 3.0 * 5.0);
    // H(4) = 0.8, so t ≥ 3·0.8 empties the inverse
    for t in [2.4, 3.0, 10.0] {
        let b = ex0_bound(&ht, 4.0, 3.0, 0.7, t).unwrap();
        assert!((b - 3.0 * (-0.7 * t).exp()).abs() <= 1e-12, "t = {t}");
    }
    assert!((ht.h_infinity - 1.0).abs() <= 1e-8);
}

#[test]
fn kappa1_matches_dense_grid() {
    let c = std::f64::consts::E;
    let got = kappa1(c, 1.0).unwrap();
    let (mut best, mut arg) = (f64::NEG_INFINITY, 0.0);
    for i in 1..=990_000 {
        let t = 1.0 + 1e-4 * i as f64;
        let g = (1.0 - c * (-t).exp()) / t.sqrt();
        if g > best {
            best = g;
            arg = t;
        }
    }
    assert!((got.value - best).abs() <= 1e-6, "{} vs {best}", got.value);
    assert!((got.argmax - arg).abs() <= 1e-3);
}

#[test]
fn kappa1_decreases_in_c() {
    let v: Vec<f64> = [1.1, 2.0, 5.0].iter().map(|c| kappa1(*c, 1.0).unwrap().value).collect();
    assert!(v[0] > v[1] && v[1] > v[2], "{v:?}");
    assert!(v.iter().all(|x| x.is_finite() && *x > 0.0));
}

#[test]
fn lemma33_matches_a_second_implementation() {
    let (c, lambda, q, k) = (2.0f64, 1.0f64, 2.0f64, 0.05f64);
    let t_hat = (2.0 * c).ln() / lambda;
    let kq2 = 2f64.powf(q - 1.0) * k.powf(q);
    let delta = 0.5 + 4f64.powf(q - 1.0) * (c * k).powf(q) * (kq2 * t_hat).exp() / (q * lambda + kq2);
    let lambda_prime = -(lambda / (2.0 * c).ln()) * delta.ln();
    let got = lemma33_constants(c, lambda, q, k).unwrap();
    assert!((got.t_hat - t_hat).abs() <= 1e-12);
    assert!((got.delta_k - delta).abs() <= 1e-12);
    assert!((got.lambda_prime - lambda_prime).abs() <= 1e-12);
    assert!(got.valid);
}

#[test]
fn lemma33_limits_and_threshold() {
    let tiny = lemma33_constants(2.0, 1.0, 2.0, 1e-9).unwrap();
    assert!((tiny.delta_k - 0.5).abs() <= 1e-12);
    assert!((tiny.lambda_prime - 2f64.ln() / 4f64.ln()).abs() <= 1e-9);
    let kq = lemma33_kq(2.0, 1.0, 2.0).unwrap();
    assert!(lemma33_constants(2.0, 1.0, 2.0, 0.99 * kq).unwrap().valid);
    assert!(!lemma33_constants(2.0, 1.0, 2.0, 1.01 * kq).unwrap().valid);
    assert!(!lemma33_constants(2.0, 1.0, 2.0, 10.0).unwrap().valid);
}

#[test]
fn g2_zero_zeta_closed_form() {
    for (alpha, t0, t2, beta) in [(1.0, 0.0, 1.0, 0.0), (0.5, 0.3, 2.0, 0.4), (3.0, 1.0, 1.5, 0.1)] {
        let g = corollary44_k(alpha, t0, 0.7, t2, beta, 0.0).unwrap();
        assert!((g.integral - 2.0 * alpha / (t2 - t0)).abs() <= 1e-8 * g.integral);
        assert!((g.k - ((t2 - t0) - beta)).abs() <= 1e-8, "{g:?}");
        assert!((g.beta_threshold - (t2 - t0)).abs() <= 1e-8);
    }
    assert!(corollary44_k(1.0, 1.0, 0.0, 0.0, 0.0, 0.0).is_err());
}

#[test]
fn g2_positive_zeta_slows_the_rate() {
    let flat = corollary44_k(1.0, 0.0, 1.0, 2.0, 0.0, 0.0).unwrap();
    let bumpy = corollary44_k(1.0, 0.0, 1.0, 2.0, 0.0, 1.0).unwrap();
    assert!(bumpy.integral > flat.integral);
    assert!(bumpy.k < flat.k && bumpy.k > 0.0);
}

fn weyl_noise(i: usize) -> f64 {
    2.0 * ((i as f64 * 0.618_033_988_749_895).fract() - 0.5)
}

#[test]
fn fit_with_noise_respects_the_floor() {
    let t: Vec<f64> = (0..200).map(|i| 0.025 * i as f64).collect();
    let v: Vec<f64> = t.iter().enumerate().map(|(i, t)| 3.0 * (-2.0 * t).exp() + 1e-3 * weyl_noise(i)).collect();
    let cert = fit_rate(&t, &v, 1e-2).unwrap();
    assert!((1.9..=2.1).contains(&cert.lambda), "{cert:?}");
    assert_eq!(cert.source, RateSource::Fitted);
    let (_, end) = cert.window.unwrap();
    assert!(3.0 * (-2.0 * end).exp() > 5e-3);
    assert!(cert.reliable);
    let below = vec![1e-3; 10];
    assert!(fit_rate(&t[..10], &below, 1e-2).is_err());
}

#[test]
fn fixed_point_without_measure_dependence_settles_at_once() {
    let dom = Domain::full_space(1).unwrap();
    let model = BuiltinModel::Ou { alpha: 2.0 }.build(1).unwrap();
    let n = 4000;
    let gamma0 = init_ensemble(n, &Sampler::dirac(vec![3.0]), &dom, 1).unwrap();
    let params = FixedPointParams { dt: 0.01, t_stat: 8.0, seed: 9, tol: 0.0, max_iters: 2 };
    let res = fixed_point_invariant(&model, &dom, &gamma0, params).unwrap();
    assert!(!res.converged);
    assert!(res.history[0] > 2.5);
    let a = init_ensemble(n, &Sampler::gaussian_iso(vec![0.0], 1.0), &dom, 100).unwrap();
    let b = init_ensemble(n, &Sampler::gaussian_iso(vec![0.0], 1.0), &dom, 200).unwrap();
    let floor = w1_1d(&a.empirical(), &b.empirical()).unwrap();
    assert!(res.history[1] <= 3.0 * floor.max(0.01), "{} vs floor {floor}", res.history[1]);
}

#[test]
fn fixed_point_of_mean_field_ou() {
    // the frozen dynamics at γ is OU with rate 1 + β around βm(γ)/(1 + β)
    let beta = 0.1;
    let dom = Domain::full_space(1).unwrap();
    let model = BuiltinModel::MeanFieldOu { beta, alpha: 2.0 }.build(1).unwrap();
    let gamma0 = init_ensemble(4000, &Sampler::gaussian_iso(vec![2.0], 1.0), &dom, 3).unwrap();
    let params = FixedPointParams { dt: 0.01, t_stat: 3.0, seed: 11, tol: 0.06, max_iters: 20 };
    let res = fixed_point_invariant(&model, &dom, &gamma0, params).unwrap();
    assert!(res.converged, "{:?}", res.history);
    assert!(res.history[0] > res.history[res.history.len() - 1]);
    let m = res.measure.mean()[0];
    let var = res.measure.points().iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3999.0;
    assert!(m.abs() <= 0.1, "{m}");
    assert!((var - 1.0 / (1.0 + beta)).abs() <= 0.1, "{var}");
    let measure = res.into_result().unwrap();
    assert_eq!(measure.len(), 4000);
}

#[test]
fn fixed_point_reports_non_convergence() {
    // β = −0.9 makes the frozen mean map m ↦ −9m expansive
    let dom = Domain::full_space(1).unwrap();
    let model = BuiltinModel::MeanFieldOu { beta: -0.9, alpha: 2.0 }.build(1).unwrap();
    let gamma0 = init_ensemble(500, &Sampler::gaussian_iso(vec![0.5], 1.0), &dom, 3).unwrap();
    let params = FixedPointParams { dt: 0.01, t_stat: 40.0, seed: 2, tol: 0.05, max_iters: 4 };
    let res = fixed_point_invariant(&model, &dom, &gamma0, params).unwrap();
    assert!(!res.converged);
    assert_eq!(res.history.len(), 4);
    assert!(res.history[3] > res.history[0]);
    assert!(res.into_result().is_err());
}

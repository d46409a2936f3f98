use std::sync::Arc;

use mvsde_core::metrics::EmpiricalMeasure;
use mvsde_core::model::{
    check_b1, check_dissipativity, check_lyapunov, check_psi_class, line_grid, radius_grid, BuiltinModel, Diffusion,
    DissipativityPair, LyapunovSpec, ModelSpec, PsiProfile,
};
use proptest::prelude::*;

fn ou() -> ModelSpec {
    BuiltinModel::Ou { alpha: 2.0 }.build(1).unwrap()
}

fn plane_grid(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    let line: Vec<f64> = line_grid(lo, hi, n).into_iter().map(|p| p[0]).collect();
    line.iter().flat_map(|a| line.iter().map(move |b| vec![*a, *b])).collect()
}

#[test]
fn ou_passes_b1_in_one_and_two_dimensions() {
    let r = check_b1(&ou(), |r| 1.0 + r, 1.0, 0.5, &line_grid(-20.0, 20.0, 4001));
    assert!(r.pass, "{:?}", r.violations.first());
    let ou2 = BuiltinModel::Ou { alpha: 2.0 }.build(2).unwrap();
    assert!(check_b1(&ou2, |r| 1.0 + r, 1.0, 0.5, &plane_grid(-10.0, 10.0, 81)).pass);
}

#[test]
fn anti_dissipative_drift_fails_b1() {
    let m = ModelSpec::new("anti", 1, Diffusion::isotropic(2.0)).unwrap().with_b1(Arc::new(|x, out| out[0] += x[0]));
    let r = check_b1(&m, |r| 1.0 + r, 1.0, 0.5, &line_grid(-5.0, 5.0, 101));
    assert!(!r.pass);
    assert!(r.violations.iter().all(|v| v.point[0].abs() > 0.0));
}

#[test]
fn quadratic_damping_passes_b1_with_c2_one() {
    // b(x) = −φ(|x|²)x, φ(r) = 1 + r: ⟨b, x⟩ = −φ|x|² ≤ c₁ − φ, and |b|/φ = |x| so c₁ must cover the grid radius
    let m = ModelSpec::new("cubic", 1, Diffusion::isotropic(2.0))
        .unwrap()
        .with_b1(Arc::new(|x, out| out[0] += -(1.0 + x[0] * x[0]) * x[0]));
    let grid = line_grid(-10.0, 10.0, 2001);
    let r = check_b1(&m, |r| 1.0 + r, 10.0, 1.0, &grid);
    assert!(r.pass, "{:?}", r.violations.first());
    let tight = check_b1(&m, |r| 1.0 + r, 1.0, 1.0, &grid);
    assert!(tight.violations.iter().all(|v| v.point[0].abs() > 1.0));
    assert!(!tight.pass);
}

#[test]
fn checker_reports_are_deterministic() {
    let grid = line_grid(-7.0, 7.0, 999);
    let a = check_b1(&ou(), |r| 1.0 + r, 1.0, 0.5, &grid);
    let b = check_b1(&ou(), |r| 1.0 + r, 1.0, 0.5, &grid);
    assert_eq!(a, b);
    let lyap = LyapunovSpec::quadratic(Arc::new(|r| r), 10.0, 0.01).unwrap();
    assert_eq!(check_lyapunov(&ou(), &lyap, &grid), check_lyapunov(&ou(), &lyap, &grid));
}

#[test]
fn lyapunov_examples() {
    let lyap = LyapunovSpec::quadratic(Arc::new(|r| r), 10.0, 0.01).unwrap();
    assert!(check_lyapunov(&ou(), &lyap, &line_grid(-5.0, 5.0, 1001)).pass);
    let free = ModelSpec::new("free", 1, Diffusion::isotropic(2.0)).unwrap();
    assert!(!check_lyapunov(&free, &lyap, &[vec![-50.0], vec![50.0]]).pass);
    let bounded = ModelSpec::new("bounded", 1, Diffusion::isotropic(2.0))
        .unwrap()
        .with_b1(Arc::new(|x, out| out[0] += x[0].sin()));
    let flat = LyapunovSpec::constant(1.0, 0.01).unwrap();
    assert!(check_lyapunov(&bounded, &flat, &line_grid(0.0, 1.0, 101)).pass);
}

fn pairs_1d(seed: u64, n: usize) -> Vec<DissipativityPair> {
    // scattered deterministic inputs from a Weyl sequence
    let frac = |k: u64, a: f64| ((k as f64 + seed as f64) * a).fract();
    (0..n as u64)
        .map(|k| {
            let pts = |s: f64| -> EmpiricalMeasure {
                let v: Vec<f64> = (0..7).map(|j| 6.0 * frac(k * 7 + j, s) - 3.0).collect();
                EmpiricalMeasure::from_values(&v).unwrap()
            };
            DissipativityPair {
                x: vec![10.0 * frac(k, 0.754_877_666) - 5.0],
                mu: pts(0.569_840_290),
                y: vec![10.0 * frac(k, 0.618_033_988) - 5.0],
                nu: pts(0.414_213_562),
            }
        })
        .collect()
}

#[test]
fn mean_field_ou_dissipativity() {
    let beta = 0.3;
    let m = BuiltinModel::MeanFieldOu { beta, alpha: 2.0 }.build(1).unwrap();
    let pairs = pairs_1d(3, 300);
    assert!(check_dissipativity(&m, -2.0, 2.0 * beta, &pairs).unwrap().pass);
    assert!(check_dissipativity(&ou(), -2.0, 0.0, &pairs).unwrap().pass);
    // without the W₂ allowance the mean-field term breaks the bound somewhere
    assert!(!check_dissipativity(&m, -2.0 - 2.0 * beta, 0.0, &pairs).unwrap().pass);
}

#[test]
fn coincident_pair_is_trivial() {
    let mu = EmpiricalMeasure::from_values(&[0.1, 0.2]).unwrap();
    let p = DissipativityPair { x: vec![1.0], mu: mu.clone(), y: vec![1.0], nu: mu };
    assert!(check_dissipativity(&ou(), 0.0, 0.0, &[p]).unwrap().pass);
}

#[test]
fn psi_class_examples() {
    let grid = radius_grid(1e-6, 1e2, 4000);
    assert!(check_psi_class(&PsiProfile::linear(), &grid));
    assert!(check_psi_class(&PsiProfile::saturating(), &grid));
}

proptest! {
    #[test]
    fn quadratic_psi_is_never_admissible(kappa in 0.0f64..1e6) {
        prop_assert!(!check_psi_class(&PsiProfile::quadratic(kappa), &radius_grid(1e-3, 10.0, 50)));
    }

    #[test]
    fn builtin_drifts_are_finite(x in -50.0f64..50.0, pts in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mu = EmpiricalMeasure::from_values(&pts).unwrap();
        for m in [
            BuiltinModel::Ou { alpha: 2.0 },
            BuiltinModel::DoubleWell { alpha: 2.0 },
            BuiltinModel::GranularMedia { beta: 0.1, alpha: 2.0 },
            BuiltinModel::MeanFieldOu { beta: 0.1, alpha: 2.0 },
            BuiltinModel::PartialDissipative { bump: 2.0, alpha: 2.0 },
        ] {
            let b = m.build(1).unwrap().drift(&[x], &mu).unwrap();
            prop_assert!(b[0].is_finite());
        }
    }

    #[test]
    fn mean_field_drift_matches_arithmetic(x in -5.0f64..5.0, pts in prop::collection::vec(-5.0f64..5.0, 1..20), beta in 0.0f64..2.0) {
        let mu = EmpiricalMeasure::from_values(&pts).unwrap();
        let mean = pts.iter().sum::<f64>() / pts.len() as f64;
        let got = BuiltinModel::MeanFieldOu { beta, alpha: 2.0 }.build(1).unwrap().drift(&[x], &mu).unwrap()[0];
        prop_assert!((got - (-x - beta * (x - mean))).abs() <= 1e-12);
    }
}

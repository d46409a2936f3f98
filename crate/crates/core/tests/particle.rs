use mvsde_core::geometry::Domain;
use mvsde_core::metrics::{bin_on_edges, EmpiricalMeasure};
use mvsde_core::model::{BuiltinModel, Diffusion, ModelSpec, PsiProfile};
use mvsde_core::numerics::normal_cdf;
use mvsde_core::particle::{
    init_ensemble, init_ensemble_for, simulate, simulate_coupled, step, CoupledEnsemble, CouplingMode, Ensemble,
    Observer, Sampler, Side,
};
use proptest::prelude::*;

fn ou(dim: usize) -> ModelSpec {
    BuiltinModel::Ou { alpha: 2.0 }.build(dim).unwrap()
}

fn brownian(alpha: f64) -> ModelSpec {
    ModelSpec::new("bm", 1, Diffusion::isotropic(alpha)).unwrap()
}

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

fn bounded_domains() -> Vec<Domain> {
    vec![
        Domain::interval(0.0, 1.0).unwrap(),
        Domain::ball(vec![0.0, 0.0], 1.0).unwrap(),
        Domain::cuboid(vec![-1.0, 0.0, 0.0], vec![1.0, 0.5, 2.0]).unwrap(),
        Domain::half_space(vec![0.0, 1.0], 0.0).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn positions_stay_in_the_closure(k in 0usize..4, seed in any::<u64>(), dt in 1e-3f64..0.5) {
        let dom = &bounded_domains()[k];
        let d = dom.dimension();
        let start = vec![0.25; d];
        let (start, _) = dom.project(&start).unwrap();
        let mut ens = init_ensemble(200, &Sampler::gaussian_iso(start, 1.0), dom, seed).unwrap();
        let model = ou(d);
        for _ in 0..20 {
            step(&mut ens, &model, dom, dt).unwrap();
            for i in 0..ens.len() {
                prop_assert!(dom.contains(ens.particle(i)).unwrap());
            }
        }
    }
}

#[test]
fn runs_are_identical_across_worker_counts() {
    let dom = Domain::ball(vec![0.0, 0.0], 2.0).unwrap();
    let model = BuiltinModel::GranularMedia { beta: 0.5, alpha: 2.0 }.build(2).unwrap();
    let ens = init_ensemble(5000, &Sampler::gaussian_iso(vec![0.5, 0.0], 1.0), &dom, 99).unwrap();
    let run = || simulate(&ens, &model, &dom, 0.01, 0.5, 10, &[Observer::Mean, Observer::LocalTime]).unwrap();
    let (a, ta) = with_threads(1, run);
    for n in [2, 8] {
        let (b, tb) = with_threads(n, run);
        assert_eq!(a.positions, b.positions, "{n} workers");
        assert_eq!(a.local_time, b.local_time);
        assert_eq!(ta, tb);
    }
}

#[test]
fn coupled_runs_are_identical_across_worker_counts() {
    let dom = Domain::full_space(1).unwrap();
    let model = BuiltinModel::PartialDissipative { bump: 2.0, alpha: 2.0 }.build(1).unwrap();
    let x = init_ensemble_for(3000, &Sampler::dirac(vec![-2.0]), &dom, 5, Side::X).unwrap();
    let y = init_ensemble_for(3000, &Sampler::gaussian_iso(vec![2.0], 0.5), &dom, 5, Side::Y).unwrap();
    let pair = CoupledEnsemble::new(x, y, CouplingMode::Reflection, 0.5).unwrap();
    let run = || simulate_coupled(&pair, &model, &dom, 0.01, 2.0, 20, &PsiProfile::saturating()).unwrap();
    let (a, ta) = with_threads(1, run);
    let (b, tb) = with_threads(8, run);
    assert_eq!(a, b);
    assert_eq!(ta, tb);
}

#[test]
fn coupled_x_side_is_the_plain_simulation() {
    let dom = Domain::interval(-3.0, 3.0).unwrap();
    let model = BuiltinModel::DoubleWell { alpha: 2.0 }.build(1).unwrap();
    let x = init_ensemble(1000, &Sampler::dirac(vec![1.0]), &dom, 17).unwrap();
    let (plain, _) = simulate(&x, &model, &dom, 0.01, 1.0, 100, &[]).unwrap();
    for mode in [CouplingMode::Synchronous, CouplingMode::Reflection] {
        let y = init_ensemble_for(1000, &Sampler::dirac(vec![-1.0]), &dom, 17, Side::Y).unwrap();
        let pair = CoupledEnsemble::new(x.clone(), y, mode, 0.5).unwrap();
        let (out, _) = simulate_coupled(&pair, &model, &dom, 0.01, 1.0, 100, &PsiProfile::linear()).unwrap();
        assert_eq!(out.x.positions, plain.positions, "{mode:?}");
    }
}

#[test]
fn coupling_is_absorbing() {
    let dom = Domain::full_space(1).unwrap();
    let model = BuiltinModel::PartialDissipative { bump: 2.0, alpha: 2.0 }.build(1).unwrap();
    let x = init_ensemble(2000, &Sampler::dirac(vec![0.0]), &dom, 3).unwrap();
    let y = init_ensemble_for(2000, &Sampler::dirac(vec![1.0]), &dom, 3, Side::Y).unwrap();
    let mut pair = CoupledEnsemble::new(x, y, CouplingMode::Reflection, 0.5).unwrap();
    let mut last = pair.coupled.clone();
    for _ in 0..300 {
        mvsde_core::particle::coupled_step(&mut pair, &model, &dom, 0.01).unwrap();
        for (i, was) in last.iter().enumerate() {
            assert!(!was || pair.coupled[i], "pair {i} decoupled");
            if pair.coupled[i] {
                assert_eq!(pair.x.particle(i), pair.y.particle(i));
            }
        }
        last = pair.coupled.clone();
    }
    assert!(last.iter().filter(|c| **c).count() > 1000);
}

#[test]
fn synchronous_identical_starts_never_separate() {
    let dom = Domain::full_space(2).unwrap();
    let x = init_ensemble(500, &Sampler::gaussian_iso(vec![0.0, 0.0], 1.0), &dom, 8).unwrap();
    let pair = CoupledEnsemble::new(x.clone(), x, CouplingMode::Synchronous, 0.0).unwrap();
    let (out, traj) = simulate_coupled(&pair, &ou(2), &dom, 0.01, 1.0, 10, &PsiProfile::linear()).unwrap();
    assert_eq!(out.x.positions, out.y.positions);
    assert!(traj.snapshots.iter().all(|s| s.mean_distance == 0.0 && s.fraction_coupled == 1.0));
}

#[test]
fn reflection_coupling_time_matches_first_passage_law() {
    // |X − Y| is a Brownian motion with diffusion 2√α until it hits 0
    let alpha = 2.0;
    let dom = Domain::full_space(1).unwrap();
    let n = 10_000;
    let x = init_ensemble(n, &Sampler::dirac(vec![0.0]), &dom, 41).unwrap();
    let y = init_ensemble_for(n, &Sampler::dirac(vec![1.0]), &dom, 41, Side::Y).unwrap();
    let pair = CoupledEnsemble::new(x, y, CouplingMode::Reflection, 0.5).unwrap();
    let dt = 1e-4;
    let (_, traj) = simulate_coupled(&pair, &brownian(alpha), &dom, dt, 1.0, 2500, &PsiProfile::linear()).unwrap();
    assert_eq!(traj.snapshots[0].fraction_coupled, 0.0);
    for s in &traj.snapshots[1..] {
        let want = 2.0 * (1.0 - normal_cdf(1.0 / (2.0 * (alpha * s.time).sqrt())));
        // 4 standard errors plus an O(√dt) monitoring allowance
        let band = 4.0 * (want * (1.0 - want) / n as f64).sqrt() + 0.01;
        assert!((s.fraction_coupled - want).abs() <= band, "t = {}: {} vs {want}", s.time, s.fraction_coupled);
    }
    let fr: Vec<f64> = traj.snapshots.iter().map(|s| s.fraction_coupled).collect();
    assert!(fr.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn uniform_init_mean_in_clt_band() {
    let dom = Domain::interval(0.0, 1.0).unwrap();
    let n = 100_000;
    let e = init_ensemble(n, &Sampler::Uniform { lower: vec![0.0], upper: vec![1.0] }, &dom, 12).unwrap();
    let band = 3.0 * (1.0 / 12f64).sqrt() / (n as f64).sqrt();
    assert!((e.mean()[0] - 0.5).abs() <= band);
}

#[test]
fn ou_variance_matches_transition_law() {
    let dom = Domain::full_space(1).unwrap();
    let n = 100_000;
    let e = init_ensemble(n, &Sampler::dirac(vec![0.7]), &dom, 77).unwrap();
    let (end, _) = simulate(&e, &ou(1), &dom, 1e-3, 1.0, 1000, &[]).unwrap();
    let m = end.mean()[0];
    let var = end.positions.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    let want = 1.0 - (-2.0f64).exp();
    let se = want * (2.0 / (n - 1) as f64).sqrt();
    assert!((var - want).abs() <= 3.0 * se, "{var} vs {want} (se {se})");
}

#[test]
fn ou_mean_decays_exponentially() {
    let dom = Domain::full_space(1).unwrap();
    let n = 20_000;
    let e = init_ensemble(n, &Sampler::dirac(vec![2.0]), &dom, 4).unwrap();
    let (_, traj) = simulate(&e, &ou(1), &dom, 1e-3, 5.0, 500, &[Observer::Mean]).unwrap();
    let means = traj.column("mean_0").unwrap();
    for (t, m) in traj.times.iter().zip(means) {
        let sd = ((1.0 - (-2.0 * t).exp()) / n as f64).sqrt();
        assert!((m - 2.0 * (-t).exp()).abs() <= 4.0 * sd + 1e-3 * t, "t = {t}");
    }
}

#[test]
fn reflected_brownian_motion_is_uniform_at_large_time() {
    // the projected scheme leaves an O(√dt) atom on the boundary, so dt must be small
    let dom = Domain::interval(0.0, 1.0).unwrap();
    let e = init_ensemble(40_000, &Sampler::dirac(vec![0.1]), &dom, 2024).unwrap();
    let (end, _) = simulate(&e, &brownian(2.0), &dom, 1e-4, 1.0, 10_000, &[]).unwrap();
    assert!(end.positions.iter().all(|x| (0.0..=1.0).contains(x)));
    let (cells, outside) = bin_on_edges(&end.empirical(), 0.0, 1.0, 10);
    assert_eq!(outside, 0.0);
    let tv: f64 = cells.iter().map(|p| (p - 0.1).abs()).sum();
    assert!(tv < 0.05, "{tv} {cells:?}");
}

#[test]
fn mean_field_empirical_mean_fluctuates_like_one_over_n() {
    let dom = Domain::full_space(1).unwrap();
    let model = BuiltinModel::MeanFieldOu { beta: 0.5, alpha: 2.0 }.build(1).unwrap();
    let seeds = 40;
    for n in [100, 400, 1600] {
        let means: Vec<f64> = (0..seeds)
            .map(|s| {
                let e = init_ensemble(n, &Sampler::gaussian_iso(vec![0.0], 1.0), &dom, 1000 + s).unwrap();
                simulate(&e, &model, &dom, 0.01, 2.0, 200, &[]).unwrap().0.mean()[0]
            })
            .collect();
        let m = means.iter().sum::<f64>() / seeds as f64;
        let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (seeds - 1) as f64;
        // the empirical mean is an OU process with variance exactly 1/N from this start
        let scaled = var * n as f64;
        assert!((0.4..=2.0).contains(&scaled), "N = {n}: N·Var = {scaled}");
    }
}

#[test]
fn ensemble_csv_round_trips() {
    let dom = Domain::full_space(2).unwrap();
    let e = init_ensemble(50, &Sampler::gaussian_iso(vec![1.0, -1.0], 2.0), &dom, 6).unwrap();
    let mut buf = Vec::new();
    e.write_csv(&mut buf, true).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let parsed: Vec<f64> = text
        .lines()
        .skip(1)
        .flat_map(|l| l.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).collect::<Vec<_>>())
        .collect();
    assert_eq!(parsed, e.positions);
    let back = Ensemble::from_positions(2, parsed, 6).unwrap();
    assert_eq!(back.empirical(), EmpiricalMeasure::uniform(2, e.positions.clone()).unwrap());
}

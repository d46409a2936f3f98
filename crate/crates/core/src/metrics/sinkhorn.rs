//! Log-domain Sinkhorn iterations with ε-scaling.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornRun {
    /// Transport cost `<P, C>` of the entropic plan.
    pub cost: f64,
    pub converged: bool,
    pub iterations: usize,
}

const MARGINAL_TOL: f64 = 1e-9;

fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Entropic transport between weights `a` (rows) and `b` (columns) for a
/// row-major `cost`. `max_iters` bounds the iterations at the target `reg`.
pub fn entropic_cost(a: &[f64], b: &[f64], cost: &[f64], reg: f64, max_iters: usize) -> SinkhornRun {
    let n = a.len();
    let m = b.len();
    let log_a: Vec<f64> = a.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|w| w.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let scale = cost.iter().cloned().fold(0.0f64, f64::max).max(reg);
    let mut eps = scale;
    let mut iterations = 0usize;
    let mut converged = false;

    loop {
        let at_target = eps <= reg;
        let eps_now = eps.max(reg);
        let budget = if at_target { max_iters } else { 50 };
        for _ in 0..budget {
            iterations += 1;
            f = (0..n)
                .into_par_iter()
                .map(|i| {
                    let row = &cost[i * m..(i + 1) * m];
                    -eps_now * log_sum_exp((0..m).map(|j| (g[j] - row[j]) / eps_now + log_b[j]))
                })
                .collect();
            g = (0..m)
                .into_par_iter()
                .map(|j| -eps_now * log_sum_exp((0..n).map(|i| (f[i] - cost[i * m + j]) / eps_now + log_a[i])))
                .collect();
            // after the g-update columns are exact; check the row marginals
            let err: f64 = (0..n)
                .map(|i| {
                    let row = &cost[i * m..(i + 1) * m];
                    let s: f64 = (0..m).map(|j| ((f[i] + g[j] - row[j]) / eps_now + log_a[i] + log_b[j]).exp()).sum();
                    (s - a[i]).abs()
                })
                .sum();
            if err < MARGINAL_TOL {
                if at_target {
                    converged = true;
                }
                break;
            }
        }
        if at_target {
            break;
        }
        eps *= 0.5;
    }

    let eps_now = eps.max(reg);
    let row_costs: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let row = &cost[i * m..(i + 1) * m];
            (0..m).map(|j| ((f[i] + g[j] - row[j]) / eps_now + log_a[i] + log_b[j]).exp() * row[j]).sum()
        })
        .collect();
    SinkhornRun { cost: crate::numerics::pairwise_sum(&row_costs), converged, iterations }
}

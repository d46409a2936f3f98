use mvsde_core::metrics::{self, EmpiricalMeasure, EXACT_LIMIT};
use mvsde_core::Result;

use crate::config::MetricSpec;

const SINKHORN_ITERS: usize = 2000;

/// `W_p`: quantile coupling in 1D, exact assignment for small equal samples,
/// debiased Sinkhorn otherwise.
pub fn wp(a: &EmpiricalMeasure, b: &EmpiricalMeasure, p: f64) -> Result<f64> {
    if a.dim() == 1 {
        return metrics::wp_1d(a, b, p);
    }
    if a.len() == b.len() && a.len() <= EXACT_LIMIT && a.is_uniform() && b.is_uniform() {
        return metrics::wp_exact(a, b, p);
    }
    let reg = metrics::default_sinkhorn_reg(a, b, p);
    Ok(metrics::wp_sinkhorn(a, b, p, reg, SINKHORN_ITERS)?.value)
}

pub fn distance(metric: &MetricSpec, a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    match metric {
        MetricSpec::W1 => wp(a, b, 1.0),
        MetricSpec::W2 => wp(a, b, 2.0),
        MetricSpec::Wp { p } => wp(a, b, *p),
        MetricSpec::WPsi { psi } => metrics::w_psi(a, b, &psi.profile()),
        MetricSpec::Tv { bins } => metrics::total_variation(a, b, *bins),
    }
}

//! Distances between empirical measures: Wasserstein `W_p`, concave transport
//! costs `W_ψ`, weighted variation, total variation and relative entropy.

pub mod assignment;
mod histogram;
pub mod sinkhorn;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use histogram::{bin_on_edges, BinRule, HistogramPair};

use crate::error::{Error, Result};
use crate::geometry::dist_sq;
use crate::model::PsiProfile;
use crate::numerics::pairwise_sum;

/// Largest support handled by the exact assignment solver.
pub const EXACT_LIMIT: usize = 2048;

/// Weighted point cloud; points are stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    uniform: bool,
}

impl EmpiricalMeasure {
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.is_empty() || !points.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter("point buffer must hold a positive number of dim-sized points".into()));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("points must be finite".into()));
        }
        let n = points.len() / dim;
        Ok(Self { dim, points, weights: vec![1.0 / n as f64; n], uniform: true })
    }

    pub fn weighted(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let mut m = Self::uniform(dim, points)?;
        if weights.len() != m.len() {
            return Err(Error::InvalidParameter("one weight per point required".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("weights must be non-negative".into()));
        }
        if (pairwise_sum(&weights) - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter("weights must sum to 1".into()));
        }
        m.uniform = weights.windows(2).all(|w| w[0] == w[1]);
        m.weights = weights;
        Ok(m)
    }

    /// One-dimensional convenience constructor.
    pub fn from_values(values: &[f64]) -> Result<Self> {
        Self::uniform(1, values.to_vec())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter_points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    /// Weighted mean, summed pairwise per coordinate.
    pub fn mean(&self) -> Vec<f64> {
        (0..self.dim)
            .map(|k| {
                let terms: Vec<f64> = self.iter_points().zip(&self.weights).map(|(x, w)| x[k] * w).collect();
                pairwise_sum(&terms)
            })
            .collect()
    }
}

fn same_dim(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    if mu.dim != nu.dim {
        return Err(Error::DimensionMismatch { expected: mu.dim, got: nu.dim });
    }
    Ok(())
}

fn sorted_with_weights(m: &EmpiricalMeasure) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = m.points.iter().cloned().zip(m.weights.iter().cloned()).collect();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    v
}

/// `W_p` on the line through the quantile (monotone) coupling; exact for any weights.
pub fn wp_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    if mu.dim != 1 || nu.dim != 1 {
        return Err(Error::InvalidParameter("one-dimensional measures required".into()));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter("p must be at least 1".into()));
    }
    let cost = |a: f64, b: f64| if p == 1.0 { (a - b).abs() } else { (a - b).abs().powf(p) };
    let terms: Vec<f64> = if mu.is_uniform() && nu.is_uniform() && mu.len() == nu.len() {
        let mut a = mu.points.clone();
        let mut b = nu.points.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let w = 1.0 / a.len() as f64;
        a.iter().zip(&b).map(|(x, y)| cost(*x, *y) * w).collect()
    } else {
        let a = sorted_with_weights(mu);
        let b = sorted_with_weights(nu);
        let (mut i, mut j) = (0, 0);
        let (mut ra, mut rb) = (a[0].1, b[0].1);
        let mut out = Vec::with_capacity(a.len() + b.len());
        loop {
            let w = ra.min(rb);
            out.push(w * cost(a[i].0, b[j].0));
            ra -= w;
            rb -= w;
            if ra <= 0.0 {
                i += 1;
                if i == a.len() {
                    break;
                }
                ra = a[i].1;
            }
            if rb <= 0.0 {
                j += 1;
                if j == b.len() {
                    break;
                }
                rb = b[j].1;
            }
        }
        out
    };
    Ok(pairwise_sum(&terms).max(0.0).powf(1.0 / p))
}

/// Exact `W_1` on the line.
pub fn w1_1d(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    wp_1d(mu, nu, 1.0)
}

fn check_assignment_inputs(metric: &'static str, mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<()> {
    same_dim(mu, nu)?;
    let n = mu.len().max(nu.len());
    if n > EXACT_LIMIT {
        return Err(Error::TooLarge { metric, limit: EXACT_LIMIT, got: n });
    }
    if mu.len() != nu.len() || !mu.is_uniform() || !nu.is_uniform() {
        return Err(Error::InvalidParameter(format!("{metric} needs equal-size uniformly weighted samples")));
    }
    Ok(())
}

fn cost_matrix<F: Fn(f64) -> f64 + Sync>(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, of_distance: F) -> Vec<f64> {
    let m = nu.len();
    let mut cost = vec![0.0; mu.len() * m];
    cost.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        let x = mu.point(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = of_distance(dist_sq(x, nu.point(j)).sqrt());
        }
    });
    cost
}

/// `W_p` by exact assignment over equal-size uniform samples.
pub fn wp_exact(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter("p must be at least 1".into()));
    }
    check_assignment_inputs("wp_exact", mu, nu)?;
    let n = mu.len();
    let cost = cost_matrix(mu, nu, |r| r.powf(p));
    let (_, total) = assignment::solve(n, &cost);
    Ok((total / n as f64).max(0.0).powf(1.0 / p))
}

/// Transport cost `inf_π ∫ ψ(|x - y|) dπ` by exact assignment.
pub fn w_psi(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, profile: &PsiProfile) -> Result<f64> {
    check_assignment_inputs("w_psi", mu, nu)?;
    let n = mu.len();
    let cost = cost_matrix(mu, nu, |r| profile.psi(r));
    let (_, total) = assignment::solve(n, &cost);
    Ok(total / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SinkhornEstimate {
    /// `S^{1/p}` where `S` is the debiased entropic cost.
    pub value: f64,
    pub reg: f64,
    pub converged: bool,
}

/// `0.05 · (median pairwise distance)^p` over the pooled sample (subsampled above 512 points).
pub fn default_sinkhorn_reg(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, p: f64) -> f64 {
    let pooled: Vec<&[f64]> = mu.iter_points().chain(nu.iter_points()).collect();
    let stride = (pooled.len() / 512).max(1);
    let sub: Vec<&[f64]> = pooled.iter().step_by(stride).cloned().collect();
    let mut d: Vec<f64> = Vec::new();
    for i in 0..sub.len() {
        for j in i + 1..sub.len() {
            d.push(dist_sq(sub[i], sub[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.05;
    }
    d.sort_by(f64::total_cmp);
    let med = d[d.len() / 2];
    (0.05 * med.powf(p)).max(1e-12)
}

/// Debiased entropic estimate of `W_p`:
/// `S = OT_ε(μ,ν) − ½OT_ε(μ,μ) − ½OT_ε(ν,ν)` with `OT_ε` the cost of the entropic plan.
pub fn wp_sinkhorn(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    p: f64,
    reg: f64,
    iters: usize,
) -> Result<SinkhornEstimate> {
    same_dim(mu, nu)?;
    if !(reg > 0.0) {
        return Err(Error::InvalidParameter("reg must be positive".into()));
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter("p must be at least 1".into()));
    }
    let run = |a: &EmpiricalMeasure, b: &EmpiricalMeasure| {
        let cost = cost_matrix(a, b, |r| r.powf(p));
        sinkhorn::entropic_cost(a.weights(), b.weights(), &cost, reg, iters)
    };
    let xy = run(mu, nu);
    let xx = run(mu, mu);
    let yy = run(nu, nu);
    let s = (xy.cost - 0.5 * xx.cost - 0.5 * yy.cost).max(0.0);
    Ok(SinkhornEstimate { value: s.powf(1.0 / p), reg, converged: xy.converged && xx.converged && yy.converged })
}

/// Weighted variation of the binned measures.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightedVariation {
    pub value: f64,
    pub bins: Vec<usize>,
    /// Average mass of the two measures in the cell where `V` is largest.
    pub top_bin_mass: f64,
    /// Set when that cell holds more than 1% of the mass: the truncation of an
    /// unbounded `V` at the sample range is then not negligible.
    pub top_bin_flag: bool,
}

/// `Σ_cells |p_k − q_k| · V(centre_k)`: the exact `sup_{|f|≤V} |μ(f) − ν(f)|`
/// of the binned measures. With `V = 1` this is the total variation norm in `[0, 2]`.
pub fn weighted_variation<V: Fn(&[f64]) -> f64>(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    v: V,
    rule: BinRule,
) -> Result<WeightedVariation> {
    let hist = HistogramPair::from_measures(mu, nu, rule)?;
    Ok(weighted_variation_binned(&hist, v))
}

pub fn weighted_variation_binned<V: Fn(&[f64]) -> f64>(hist: &HistogramPair, v: V) -> WeightedVariation {
    let weights: Vec<f64> = (0..hist.len()).map(|k| v(&hist.center(k))).collect();
    let terms: Vec<f64> = (0..hist.len()).map(|k| (hist.p[k] - hist.q[k]).abs() * weights[k]).collect();
    let top = (0..hist.len()).max_by(|a, b| weights[*a].total_cmp(&weights[*b])).unwrap_or(0);
    let top_bin_mass = 0.5 * (hist.p[top] + hist.q[top]);
    WeightedVariation {
        value: pairwise_sum(&terms),
        bins: hist.shape(),
        top_bin_mass,
        top_bin_flag: top_bin_mass > 0.01,
    }
}

/// Total variation norm `‖μ − ν‖_var = Σ |p_k − q_k|` of the binned measures.
pub fn total_variation(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, rule: BinRule) -> Result<f64> {
    Ok(weighted_variation(mu, nu, |_| 1.0, rule)?.value)
}

/// `Σ p̃ log(p̃/q̃)` with additive smoothing `p̃ = (p + λ)/(1 + Bλ)` on both vectors.
/// Returns `+∞` when some `q̃_k = 0 < p̃_k`.
pub fn relative_entropy(hist: &HistogramPair, pseudo_count: f64) -> f64 {
    let b = hist.len() as f64;
    let norm = 1.0 + b * pseudo_count;
    let terms: Vec<f64> = hist
        .p
        .iter()
        .zip(&hist.q)
        .map(|(p, q)| {
            let ps = (p + pseudo_count) / norm;
            let qs = (q + pseudo_count) / norm;
            if ps == 0.0 {
                0.0
            } else if qs == 0.0 {
                f64::INFINITY
            } else {
                ps * (ps / qs).ln()
            }
        })
        .collect();
    pairwise_sum(&terms).max(0.0)
}

/// Relative entropy at the default pseudo-count `0.5/N` and at `0.1/N`, `1/N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyReport {
    pub value: f64,
    pub low_smoothing: f64,
    pub high_smoothing: f64,
}

pub fn relative_entropy_report(hist: &HistogramPair, sample_size: usize) -> EntropyReport {
    let n = sample_size.max(1) as f64;
    EntropyReport {
        value: relative_entropy(hist, 0.5 / n),
        low_smoothing: relative_entropy(hist, 0.1 / n),
        high_smoothing: relative_entropy(hist, 1.0 / n),
    }
}

/// Distance between two independent samples of one law: the resolution below
/// which a measured distance carries no signal.
pub fn noise_floor<F>(a: &EmpiricalMeasure, b: &EmpiricalMeasure, metric: F) -> Result<f64>
where
    F: Fn(&EmpiricalMeasure, &EmpiricalMeasure) -> Result<f64>,
{
    metric(a, b)
}

/// Result of the Gaussian transport-entropy spot check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TalagrandCheck {
    pub w2_sq: f64,
    pub entropy: f64,
    /// `2 · Ent · variance`.
    pub bound: f64,
    pub holds: bool,
}

/// Compares `W₂²` with `2·σ²·Ent` for `N(shift, σ²)` against `N(0, σ²)`, both
/// discretised on a common grid of `cells` cells over ±`span` standard deviations.
/// Equality holds in the continuum; `rel_tol` absorbs discretisation error.
pub fn talagrand_gaussian_check(shift: f64, sd: f64, cells: usize, span: f64, rel_tol: f64) -> Result<TalagrandCheck> {
    if !(sd > 0.0) || cells < 2 {
        return Err(Error::InvalidParameter("need sd > 0 and at least two cells".into()));
    }
    let lo = shift.min(0.0) - span * sd;
    let hi = shift.max(0.0) + span * sd;
    let h = (hi - lo) / cells as f64;
    let centers: Vec<f64> = (0..cells).map(|k| lo + (k as f64 + 0.5) * h).collect();
    let density = |m: f64| -> Vec<f64> {
        let raw: Vec<f64> = centers.iter().map(|x| (-(x - m).powi(2) / (2.0 * sd * sd)).exp()).collect();
        let s = pairwise_sum(&raw);
        raw.iter().map(|v| v / s).collect()
    };
    let p = density(shift);
    let q = density(0.0);
    let edges: Vec<f64> = (0..=cells).map(|k| lo + h * k as f64).collect();
    let hist = HistogramPair::new(vec![edges], p.clone(), q.clone())?;
    let entropy = relative_entropy(&hist, 0.0);
    let mu = EmpiricalMeasure::weighted(1, centers.clone(), renormalise(p))?;
    let nu = EmpiricalMeasure::weighted(1, centers, renormalise(q))?;
    let w2 = wp_1d(&mu, &nu, 2.0)?;
    let w2_sq = w2 * w2;
    let bound = 2.0 * entropy * sd * sd;
    Ok(TalagrandCheck { w2_sq, entropy, bound, holds: w2_sq <= bound * (1.0 + rel_tol) })
}

fn renormalise(mut w: Vec<f64>) -> Vec<f64> {
    let s = pairwise_sum(&w);
    w.iter_mut().for_each(|v| *v /= s);
    w
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m1(v: &[f64]) -> EmpiricalMeasure {
        EmpiricalMeasure::from_values(v).unwrap()
    }

    #[test]
    fn w1_examples() {
        let a = m1(&[0.3, -1.0, 2.0]);
        assert_eq!(w1_1d(&a, &a).unwrap(), 0.0);
        assert_eq!(w1_1d(&m1(&[0.0]), &m1(&[3.0])).unwrap(), 3.0);
        assert_eq!(w1_1d(&m1(&[0.0, 1.0]), &m1(&[2.0, 5.0])).unwrap(), 3.0);
    }

    #[test]
    fn w1_rejects_2d() {
        let a = EmpiricalMeasure::uniform(2, vec![0.0, 0.0]).unwrap();
        assert!(w1_1d(&a, &a).is_err());
    }

    #[test]
    fn weighted_quantile_coupling() {
        // 3/4 at 0, 1/4 at 4  vs  uniform on {1}: W1 = 3/4 * 1 + 1/4 * 3
        let a = EmpiricalMeasure::weighted(1, vec![0.0, 4.0], vec![0.75, 0.25]).unwrap();
        let b = m1(&[1.0]);
        assert!((w1_1d(&a, &b).unwrap() - 1.5).abs() < 1e-15);
        let w2 = wp_1d(&a, &b, 2.0).unwrap();
        assert!((w2 - (0.75f64 + 0.25 * 9.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn exact_size_limit() {
        let big = m1(&vec![0.0; EXACT_LIMIT + 1]);
        assert!(matches!(wp_exact(&big, &big, 2.0), Err(Error::TooLarge { .. })));
    }

    #[test]
    fn weighted_variation_point_masses() {
        let v =
            weighted_variation(&m1(&[0.0]), &m1(&[1.0]), |x| 1.0 + x[0] * x[0], BinRule::Count { bins: 2 }).unwrap();
        assert_eq!(v.value, 3.0);
        let tv = total_variation(&m1(&[0.0, 0.1]), &m1(&[5.0, 5.1]), BinRule::FreedmanDiaconis).unwrap();
        assert_eq!(tv, 2.0);
        let same = m1(&[0.2, 0.4, 0.9]);
        assert_eq!(total_variation(&same, &same, BinRule::default()).unwrap(), 0.0);
        let point = m1(&[1.0, 1.0]);
        assert_eq!(total_variation(&point, &point, BinRule::default()).unwrap(), 0.0);
    }

    #[test]
    fn entropy_examples() {
        let edges = vec![vec![0.0, 1.0, 2.0]];
        let h = HistogramPair::new(edges.clone(), vec![1.0, 0.0], vec![0.5, 0.5]).unwrap();
        assert!((relative_entropy(&h, 0.0) - 2f64.ln()).abs() < 1e-15);
        let h = HistogramPair::new(edges.clone(), vec![0.3, 0.7], vec![0.3, 0.7]).unwrap();
        assert_eq!(relative_entropy(&h, 0.0), 0.0);
        let h = HistogramPair::new(edges, vec![0.5, 0.5], vec![1.0, 0.0]).unwrap();
        assert_eq!(relative_entropy(&h, 0.0), f64::INFINITY);
        assert!(relative_entropy(&h, 0.01).is_finite());
    }

    #[test]
    fn talagrand_gaussian_shift() {
        for shift in [0.1, 0.5, 1.0, 2.0] {
            let c = talagrand_gaussian_check(shift, 1.3, 2000, 9.0, 0.05).unwrap();
            assert!(c.holds, "{c:?}");
            // the continuum case is an equality, so the discrete one must be close
            assert!((c.w2_sq / c.bound - 1.0).abs() < 0.05, "{c:?}");
        }
    }
}

//! Explicit rate constants, the `H`-transform bound, exponential fits of
//! measured distance curves, and the fixed-point iteration `γ ↦ μ_γ` for
//! invariant measures.

use std::fmt;
use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::metrics::{self, EmpiricalMeasure};
use crate::model::ModelSpec;
use crate::numerics::{adaptive_simpson, bisect_increasing, bracketed_max, integrate, Maximum};
use crate::particle::{simulate, Ensemble};

/// Relative tolerance of the scalar maximisations and integrals.
pub const CALC_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RateSource {
    Fitted,
    Harris,
    Lemma33,
    Corollary44,
    Theorem41,
}

/// `‖·‖ ≤ c e^{−λt}`, with fit diagnostics where applicable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateCertificate {
    pub c: f64,
    pub lambda: f64,
    pub source: RateSource,
    pub r_squared: Option<f64>,
    pub window: Option<(f64, f64)>,
    pub noise_floor: Option<f64>,
    pub points_used: usize,
    pub reliable: bool,
}

impl RateCertificate {
    pub fn explicit(c: f64, lambda: f64, source: RateSource) -> Self {
        Self { c, lambda, source, r_squared: None, window: None, noise_floor: None, points_used: 0, reliable: true }
    }
}

/// `Φ ≥ 1` and `H(r) = ∫₀^r ds/Φ(s)` tabulated on `[0, r_max]`; values between
/// nodes integrate from the nearest node below.
#[derive(Clone)]
pub struct HTransform {
    phi: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    nodes: Vec<f64>,
    values: Vec<f64>,
    /// `H(∞)`; infinite when the tail integral diverges.
    pub h_infinity: f64,
}

impl fmt::Debug for HTransform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "HTransform(r_max = {}, nodes = {}, H(∞) = {})", self.r_max(), self.nodes.len(), self.h_infinity)
    }
}

/// Tail terms `∫_{R2^k}^{R2^{k+1}} ds/Φ` decaying at least this fast count as summable.
const TAIL_RATIO_LIMIT: f64 = 0.999;

pub fn build_h_transform(
    phi: impl Fn(f64) -> f64 + Send + Sync + 'static,
    r_max: f64,
    table_size: usize,
) -> Result<HTransform> {
    if !(r_max > 0.0) || table_size < 2 {
        return Err(Error::InvalidParameter("need r_max > 0 and at least two nodes".into()));
    }
    let nodes: Vec<f64> = (0..table_size).map(|k| r_max * k as f64 / (table_size - 1) as f64).collect();
    let mut last = f64::NEG_INFINITY;
    for &r in &nodes {
        let p = phi(r);
        if !(p >= 1.0) {
            return Err(Error::InvalidParameter(format!("Φ({r}) = {p} < 1")));
        }
        if p < last {
            return Err(Error::InvalidParameter(format!("Φ is not increasing near r = {r}")));
        }
        last = p;
    }
    let inv = |s: f64| 1.0 / phi(s);
    let mut values = vec![0.0; table_size];
    for k in 1..table_size {
        values[k] = values[k - 1] + adaptive_simpson(&inv, nodes[k - 1], nodes[k], 1e-14);
    }
    let h_infinity = values[table_size - 1] + tail_integral(&inv, r_max);
    Ok(HTransform { phi: Arc::new(phi), nodes, values, h_infinity })
}

/// `∫_R^∞ f` over doubling intervals; infinite unless the terms decay geometrically.
fn tail_integral<F: Fn(f64) -> f64>(f: &F, r: f64) -> f64 {
    let mut lo = r;
    let mut total = 0.0;
    let mut prev = f64::NAN;
    let mut ratio = f64::NAN;
    for _ in 0..1000 {
        let hi = 2.0 * lo;
        if !hi.is_finite() {
            break;
        }
        let term = integrate(f, lo, hi, 8, 1e-15 * (total + 1e-300));
        total += term;
        if prev.is_finite() && prev > 0.0 {
            ratio = term / prev;
        }
        if term <= 1e-17 * total {
            return total;
        }
        if ratio.is_finite() && ratio <= TAIL_RATIO_LIMIT && term * ratio / (1.0 - ratio) <= 1e-13 * total {
            return total + term * ratio / (1.0 - ratio);
        }
        prev = term;
        lo = hi;
    }
    if ratio.is_finite() && ratio <= TAIL_RATIO_LIMIT {
        total
    } else {
        f64::INFINITY
    }
}

impl HTransform {
    pub fn r_max(&self) -> f64 {
        *self.nodes.last().expect("non-empty table")
    }

    pub fn phi(&self, r: f64) -> f64 {
        (self.phi)(r)
    }

    /// `H(r)` for `r ≥ 0`.
    pub fn h(&self, r: f64) -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        let r_max = self.r_max();
        if r >= r_max {
            let inv = |s: f64| 1.0 / self.phi(s);
            let top = *self.values.last().expect("non-empty table");
            return if r == r_max { top } else { top + integrate(&inv, r_max, r, 64, 1e-14) };
        }
        let k = self.nodes.partition_point(|&x| x <= r) - 1;
        if self.nodes[k] == r {
            return self.values[k];
        }
        let inv = |s: f64| 1.0 / self.phi(s);
        self.values[k] + adaptive_simpson(&inv, self.nodes[k], r, 1e-15)
    }

    /// `H⁻¹(s)`, with `H⁻¹(s) = 0` for `s ≤ 0` and `∞` for `s ≥ H(∞)`.
    pub fn h_inv(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        if s >= self.h_infinity {
            return f64::INFINITY;
        }
        let top = *self.values.last().expect("non-empty table");
        let (mut lo, mut hi) = if s <= top {
            let k = self.values.partition_point(|&v| v < s);
            if self.values[k] == s {
                return self.nodes[k];
            }
            (self.nodes[k - 1], self.nodes[k])
        } else {
            let mut hi = 2.0 * self.r_max();
            while self.h(hi) < s {
                hi *= 2.0;
                if !hi.is_finite() {
                    return f64::INFINITY;
                }
            }
            (hi / 2.0, hi)
        };
        // safeguarded Newton on the monotone H, H' = 1/Φ
        let mut r = 0.5 * (lo + hi);
        for _ in 0..200 {
            let g = self.h(r) - s;
            if g > 0.0 {
                hi = r;
            } else {
                lo = r;
            }
            let next = r - g * self.phi(r);
            let next = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
            if (next - r).abs() <= 1e-15 * r.max(1.0) {
                return next;
            }
            r = next;
        }
        r
    }
}

/// `k{1 + H⁻¹(H(V_x) − t/k)}e^{−λt}`.
pub fn ex0_bound(ht: &HTransform, v_x: f64, k: f64, lambda: f64, t: f64) -> Result<f64> {
    if !(v_x >= 1.0) || !(k > 1.0) || !(lambda > 0.0) || !(t >= 0.0) {
        return Err(Error::InvalidParameter("need V(x) ≥ 1, k > 1, λ > 0, t ≥ 0".into()));
    }
    let inner = if t == 0.0 { v_x } else { ht.h_inv(ht.h(v_x) - t / k) };
    Ok(k * (1.0 + inner) * (-lambda * t).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarrisRate {
    pub lambda: f64,
    /// One-step contraction factor `(2 − α²(2 − β))/2`.
    pub delta: f64,
}

/// `λ = log(2/(2 − α²(2 − β)))/(t₀ + t₁)` for the uniform minorisation/drift pair.
pub fn harris_rate(alpha: f64, beta: f64, t0: f64, t1: f64) -> Result<HarrisRate> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidParameter(format!("α = {alpha} must lie in (0, 1]")));
    }
    if !(0.0..2.0).contains(&beta) {
        return Err(Error::InvalidParameter(format!("β = {beta} must lie in [0, 2)")));
    }
    if !(t0 > 0.0 && t1 > 0.0) {
        return Err(Error::InvalidParameter("t0 and t1 must be positive".into()));
    }
    let q = alpha * alpha * (2.0 - beta);
    if !(q < 2.0) {
        return Err(Error::InvalidParameter("need α²(2 − β) < 2".into()));
    }
    Ok(HarrisRate { lambda: (2.0 / (2.0 - q)).ln() / (t0 + t1), delta: (2.0 - q) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Kappa1 {
    pub value: f64,
    pub argmax: f64,
}

/// `κ₁ = sup_{t > log(c)/λ} (1 − c e^{−λt})/√t` by bracket expansion and golden section.
pub fn kappa1(c: f64, lambda: f64) -> Result<Kappa1> {
    if !(c > 1.0) || !(lambda > 0.0) {
        return Err(Error::InvalidParameter("need c > 1 and λ > 0".into()));
    }
    let g = |t: f64| (1.0 - c * (-lambda * t).exp()) / t.sqrt();
    let lo = c.ln() / lambda;
    let Maximum { argmax, value } = bracketed_max(&g, lo, 1.0 / lambda, 1e-12);
    Ok(Kappa1 { value, argmax })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lemma33 {
    pub t_hat: f64,
    pub delta_k: f64,
    pub lambda_prime: f64,
    /// False when `δ_k ≥ 1`: the perturbation destroys the contraction.
    pub valid: bool,
}

fn lemma33_perturbation(c: f64, lambda: f64, q: f64, k: f64, t: f64) -> f64 {
    let a = 2f64.powf(q - 1.0) * k.powf(q);
    4f64.powf(q - 1.0) * (c * k).powf(q) * (a * t).exp() / (q * lambda + a)
}

fn check_lemma33(c: f64, lambda: f64, q: f64) -> Result<()> {
    if !(c > 0.0) || !(lambda > 0.0) || !(q >= 2.0) {
        return Err(Error::InvalidParameter("need c > 0, λ > 0, q ≥ 2".into()));
    }
    if !(2.0 * c > 1.0) {
        return Err(Error::InvalidParameter("need 2c > 1 so that t̂ > 0".into()));
    }
    Ok(())
}

/// `t̂ = log(2c)/λ`, `δ_k = 1/2 + 4^{q−1}(ck)^q e^{2^{q−1}k^q t̂}/(qλ + 2^{q−1}k^q)`,
/// `λ' = −(λ/log 2c) log δ_k`; the exponent's time is taken at `t̂`.
pub fn lemma33_constants(c: f64, lambda: f64, q: f64, k: f64) -> Result<Lemma33> {
    check_lemma33(c, lambda, q)?;
    if !(k > 0.0) {
        return Err(Error::InvalidParameter("k must be positive".into()));
    }
    let t_hat = (2.0 * c).ln() / lambda;
    let delta_k = 0.5 + lemma33_perturbation(c, lambda, q, k, t_hat);
    Ok(Lemma33 { t_hat, delta_k, lambda_prime: -(lambda / (2.0 * c).ln()) * delta_k.ln(), valid: delta_k < 1.0 })
}

/// `k_q`: the largest `k` with perturbation term `≤ 1/2`, by bisection.
pub fn lemma33_kq(c: f64, lambda: f64, q: f64) -> Result<f64> {
    check_lemma33(c, lambda, q)?;
    let t_hat = (2.0 * c).ln() / lambda;
    let f = |k: f64| lemma33_perturbation(c, lambda, q, k, t_hat);
    let mut hi = 1.0;
    while f(hi) < 0.5 {
        hi *= 2.0;
    }
    Ok(bisect_increasing(&f, 0.0, hi, 0.5, 200))
}

/// `γ(r) = (θ₁ + θ₂){(ζ/r) ∧ r} − (θ₂ − θ₀)r` together with `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct G2 {
    pub alpha: f64,
    pub theta0: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub beta: f64,
    pub zeta: f64,
    /// `∫₀^∞ t exp(∫₀^t γ/(2α)) dt`.
    pub integral: f64,
    pub k: f64,
    /// The largest `β` for which `k > 0`.
    pub beta_threshold: f64,
}

impl G2 {
    pub fn gamma(&self, r: f64) -> f64 {
        let capped = if r > 0.0 { (self.zeta / r).min(r) } else { 0.0 };
        (self.theta1 + self.theta2) * capped - (self.theta2 - self.theta0) * r
    }

    /// `∫₀^t γ(u) du` in closed form; the cap switches at `u = √ζ`.
    pub fn gamma_integral(&self, t: f64) -> f64 {
        let s = self.zeta.sqrt();
        let capped = if self.zeta == 0.0 {
            0.0
        } else if t <= s {
            0.5 * t * t
        } else {
            0.5 * self.zeta + self.zeta * (t / s).ln()
        };
        (self.theta1 + self.theta2) * capped - 0.5 * (self.theta2 - self.theta0) * t * t
    }
}

pub fn corollary44_k(alpha: f64, theta0: f64, theta1: f64, theta2: f64, beta: f64, zeta: f64) -> Result<G2> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter("α must be positive".into()));
    }
    if [theta0, theta1, theta2, beta, zeta].iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidParameter("θ₀, θ₁, θ₂, β, ζ must be nonnegative".into()));
    }
    if !(theta2 > theta0) {
        return Err(Error::Divergent(format!(
            "θ₂ = {theta2} ≤ θ₀ = {theta0}: γ does not decay and the integral diverges"
        )));
    }
    let mut g2 =
        G2 { alpha, theta0, theta1, theta2, beta, zeta, integral: f64::NAN, k: f64::NAN, beta_threshold: f64::NAN };
    let integrand = |t: f64| t * (g2.gamma_integral(t) / (2.0 * alpha)).exp();
    // integrate over unit-scale pieces until the integrand is negligible
    let a = theta2 - theta0;
    let scale = (2.0 * alpha / a).sqrt().max(zeta.sqrt()).max(1e-300);
    let mut total: f64 = 0.0;
    let mut lo = 0.0;
    loop {
        let hi = lo + scale;
        total += adaptive_simpson(&integrand, lo, hi, CALC_TOL * 1e-6 * total.max(scale * scale));
        lo = hi;
        if integrand(lo) < 1e-16 * total.max(f64::MIN_POSITIVE) && lo > zeta.sqrt() {
            break;
        }
        if !total.is_finite() || lo > 1e6 * scale {
            return Err(Error::Divergent("outer integral did not converge".into()));
        }
    }
    g2.integral = total;
    g2.k = 2.0 * alpha / total - beta * a * total / (2.0 * alpha);
    g2.beta_threshold = 4.0 * alpha * alpha / (a * total * total);
    Ok(g2)
}

/// Burn-in and reliability settings for [`fit_rate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FitOptions {
    /// Fraction of the horizon discarded at the start.
    pub burn_in_fraction: f64,
    pub min_points: usize,
    pub min_r_squared: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { burn_in_fraction: 0.1, min_points: 4, min_r_squared: 0.9 }
    }
}

/// Least squares of `log value` on time over the window after burn-in and before
/// the first value at or below `noise_floor`.
pub fn fit_rate(times: &[f64], values: &[f64], noise_floor: f64) -> Result<RateCertificate> {
    fit_rate_with(times, values, noise_floor, FitOptions::default())
}

pub fn fit_rate_with(times: &[f64], values: &[f64], noise_floor: f64, opts: FitOptions) -> Result<RateCertificate> {
    if times.len() != values.len() {
        return Err(Error::InvalidParameter("times and values differ in length".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("times must be strictly increasing".into()));
    }
    let need = opts.min_points.max(2);
    if times.is_empty() {
        return Err(Error::TooFewPoints { got: 0, need });
    }
    let start = times[0] + opts.burn_in_fraction * (times[times.len() - 1] - times[0]);
    let mut window = Vec::new();
    for (t, v) in times.iter().zip(values) {
        if *t < start {
            continue;
        }
        if !(*v > noise_floor) || !(*v > 0.0) {
            break;
        }
        window.push((*t, v.ln()));
    }
    if window.len() < need {
        return Err(Error::TooFewPoints { got: window.len(), need });
    }
    let n = window.len() as f64;
    let mt = window.iter().map(|p| p.0).sum::<f64>() / n;
    let my = window.iter().map(|p| p.1).sum::<f64>() / n;
    let stt: f64 = window.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sty: f64 = window.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let syy: f64 = window.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sty / stt;
    let intercept = my - slope * mt;
    let sse: f64 = window.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(RateCertificate {
        c: intercept.exp(),
        lambda: -slope,
        source: RateSource::Fitted,
        r_squared: Some(r_squared),
        window: Some((window[0].0, window[window.len() - 1].0)),
        noise_floor: Some(noise_floor),
        points_used: window.len(),
        reliable: r_squared >= opts.min_r_squared && window.len() >= opts.min_points,
    })
}

/// Simulation settings for each fixed-point iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointParams {
    pub dt: f64,
    /// Horizon `T_stat` of each frozen-measure run.
    pub t_stat: f64,
    pub seed: u64,
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPointResult {
    pub measure: EmpiricalMeasure,
    /// `W₁` gaps between successive iterates.
    pub history: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

impl FixedPointResult {
    /// The measure, or a non-convergence error carrying the last gap.
    pub fn into_result(self) -> Result<EmpiricalMeasure> {
        if self.converged {
            Ok(self.measure)
        } else {
            Err(Error::NoConvergence {
                iterations: self.iterations,
                last_change: self.history.last().copied().unwrap_or(f64::NAN),
            })
        }
    }
}

/// `W₁` used for fixed-point gaps: exact quantile coupling in 1D, assignment for
/// small equal-size samples, Sinkhorn otherwise.
pub fn w1_gap(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64> {
    if a.dim() == 1 {
        return metrics::w1_1d(a, b);
    }
    if a.len() == b.len() && a.len() <= metrics::EXACT_LIMIT {
        return metrics::wp_exact(a, b, 1.0);
    }
    let reg = metrics::default_sinkhorn_reg(a, b, 1.0);
    Ok(metrics::wp_sinkhorn(a, b, 1.0, reg, 2000)?.value)
}

/// Iterates `γ_{n+1} = μ_{γ_n}`: each iterate freezes the measure argument at
/// `γ_n`, runs the particles (warm-started at `γ_n`, fresh seed per iterate)
/// to `T_stat`, and takes the terminal empirical law.
pub fn fixed_point_invariant(
    model: &ModelSpec,
    domain: &Domain,
    gamma0: &Ensemble,
    params: FixedPointParams,
) -> Result<FixedPointResult> {
    let mut gamma = gamma0.clone();
    let mut history = Vec::new();
    for it in 0..params.max_iters {
        let frozen = model.frozen_at(gamma.empirical());
        let mut start = gamma.clone();
        start.seed = params.seed.wrapping_add(it as u64 + 1);
        start.time = 0.0;
        start.step_index = 0;
        start.local_time.iter_mut().for_each(|v| *v = 0.0);
        let (next, _) = simulate(&start, &frozen, domain, params.dt, params.t_stat, usize::MAX, &[])?;
        let gap = w1_gap(&next.empirical(), &gamma.empirical())?;
        history.push(gap);
        gamma = next;
        if gap < params.tol {
            return Ok(FixedPointResult { measure: gamma.empirical(), history, converged: true, iterations: it + 1 });
        }
    }
    Ok(FixedPointResult { measure: gamma.empirical(), history, converged: false, iterations: params.max_iters })
}

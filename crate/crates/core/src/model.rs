//! Drift and diffusion coefficients of the mean-field dynamics, the built-in
//! example models, and grid-based certificates for the structural
//! hypotheses (growth/dissipativity of the drift, Lyapunov drift condition,
//! monotonicity in `W₂`, and the `Ψ_κ` profile class).
//!
//! The certificates are finite checks on user-supplied grids, not proofs.
//! Every report records what was checked so it can be reproduced.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist_sq, dot, norm};
use crate::metrics::{self, EmpiricalMeasure};
use crate::numerics::pairwise_sum;

pub type VectorField = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;
pub type KernelFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.is_empty() || cols == 0 || rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidModel("matrix rows must be non-empty and equal length".into()));
        }
        Ok(Self { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `A Aᵀ`.
    pub fn gram(&self) -> Matrix {
        let mut out = vec![0.0; self.rows * self.rows];
        for i in 0..self.rows {
            for j in 0..self.rows {
                out[i * self.rows + j] = (0..self.cols).map(|k| self.get(i, k) * self.get(j, k)).sum();
            }
        }
        Matrix { rows: self.rows, cols: self.rows, data: out }
    }
}

/// Mean-field interaction `(1/N) Σ_z W(x, z)`.
#[derive(Clone)]
pub enum Interaction {
    None,
    /// `W(x, z) = −β (x − z)`; the average only needs the mean of the measure.
    Affine {
        beta: f64,
    },
    /// General bounded kernel, O(N²) per step. `bound` enables the |W| warning.
    Kernel {
        w: KernelFn,
        bound: Option<f64>,
    },
}

impl fmt::Debug for Interaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Interaction::None => write!(f, "None"),
            Interaction::Affine { beta } => write!(f, "Affine {{ beta: {beta} }}"),
            Interaction::Kernel { bound, .. } => write!(f, "Kernel {{ bound: {bound:?} }}"),
        }
    }
}

/// Which distance the measure dependence is Lipschitz in (informational).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InteractionMode {
    Variation,
    #[default]
    Wasserstein,
}

#[derive(Clone)]
pub enum Diffusion {
    /// Constant `σ = [√α I_d | σ̂]`, so `σσ* = α I_d + σ̂σ̂*`.
    Split { alpha: f64, hat: Option<Matrix> },
    /// State-dependent `d × cols` matrix with no isotropic split.
    Field { cols: usize, sigma: VectorField },
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Split { alpha, hat } => write!(f, "Split {{ alpha: {alpha}, hat: {hat:?} }}"),
            Diffusion::Field { cols, .. } => write!(f, "Field {{ cols: {cols} }}"),
        }
    }
}

impl Diffusion {
    pub fn isotropic(alpha: f64) -> Self {
        Diffusion::Split { alpha, hat: None }
    }

    /// Number of driving Brownian components.
    pub fn noise_dim(&self, d: usize) -> usize {
        match self {
            Diffusion::Split { hat, .. } => d + hat.as_ref().map_or(0, |h| h.cols),
            Diffusion::Field { cols, .. } => *cols,
        }
    }

    /// `σ(x)` as a `d × noise_dim` matrix.
    pub fn matrix_at(&self, x: &[f64]) -> Matrix {
        let d = x.len();
        let m = self.noise_dim(d);
        let mut data = vec![0.0; d * m];
        match self {
            Diffusion::Split { alpha, hat } => {
                let s = alpha.sqrt();
                for i in 0..d {
                    data[i * m + i] = s;
                    if let Some(h) = hat {
                        for k in 0..h.cols {
                            data[i * m + d + k] = h.get(i, k);
                        }
                    }
                }
            }
            Diffusion::Field { sigma, .. } => sigma(x, &mut data),
        }
        Matrix { rows: d, cols: m, data }
    }

    /// Adds `σ(x) ξ` to `out`.
    #[inline(always)]
    pub fn apply(&self, x: &[f64], xi: &[f64], scale: f64, out: &mut [f64]) {
        match self {
            Diffusion::Split { alpha, hat } => {
                let s = alpha.sqrt() * scale;
                let d = out.len();
                for (o, z) in out.iter_mut().zip(xi) {
                    *o += s * z;
                }
                if let Some(h) = hat {
                    for (i, o) in out.iter_mut().enumerate() {
                        let acc = (0..h.cols).fold(0.0, |acc, k| acc + h.get(i, k) * xi[d + k]);
                        *o += scale * acc;
                    }
                }
            }
            Diffusion::Field { .. } => {
                let sm = self.matrix_at(x);
                for (i, o) in out.iter_mut().enumerate().take(sm.rows) {
                    let acc = (0..sm.cols).fold(0.0, |acc, k| acc + sm.get(i, k) * xi[k]);
                    *o += scale * acc;
                }
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Diffusion::Split { .. })
    }

    /// The isotropic part `α` when the split is available.
    pub fn isotropic_alpha(&self) -> Option<f64> {
        match self {
            Diffusion::Split { alpha, .. } => Some(*alpha),
            Diffusion::Field { .. } => None,
        }
    }
}

/// What the drift needs to know about the current measure.
#[derive(Debug, Clone)]
pub enum MeasureSummary<'a> {
    Nothing,
    Mean(Vec<f64>),
    Cloud { dim: usize, points: &'a [f64], weights: Option<&'a [f64]> },
}

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    dim: usize,
    b0: Option<VectorField>,
    b1: Option<VectorField>,
    interaction: Interaction,
    pub mode: InteractionMode,
    diffusion: Diffusion,
    frozen: Option<Arc<EmpiricalMeasure>>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("dim", &self.dim)
            .field("b0", &self.b0.is_some())
            .field("b1", &self.b1.is_some())
            .field("interaction", &self.interaction)
            .field("diffusion", &self.diffusion)
            .field("frozen", &self.frozen.is_some())
            .finish()
    }
}

/// Above this many particles the O(N²) kernel fallback is reported as expensive.
pub const KERNEL_WARN_N: usize = 20_000;

impl ModelSpec {
    pub fn new(name: impl Into<String>, dim: usize, diffusion: Diffusion) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidModel("dimension must be positive".into()));
        }
        match &diffusion {
            Diffusion::Split { alpha, hat } => {
                if !(*alpha > 0.0) {
                    return Err(Error::InvalidModel("isotropic part α must be positive".into()));
                }
                if let Some(h) = hat {
                    if h.rows != dim {
                        return Err(Error::InvalidModel("σ̂ must have d rows".into()));
                    }
                }
            }
            Diffusion::Field { cols, .. } => {
                if *cols == 0 {
                    return Err(Error::InvalidModel("σ needs at least one column".into()));
                }
            }
        }
        Ok(Self {
            name: name.into(),
            dim,
            b0: None,
            b1: None,
            interaction: Interaction::None,
            mode: InteractionMode::default(),
            diffusion,
            frozen: None,
        })
    }

    /// Bounded, possibly discontinuous part of the drift.
    pub fn with_b0(mut self, f: VectorField) -> Self {
        self.b0 = Some(f);
        self
    }

    /// Locally bounded, coercive part of the drift.
    pub fn with_b1(mut self, f: VectorField) -> Self {
        self.b1 = Some(f);
        self
    }

    pub fn with_interaction(mut self, interaction: Interaction) -> Self {
        self.interaction = interaction;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn diffusion(&self) -> &Diffusion {
        &self.diffusion
    }

    pub fn interaction(&self) -> &Interaction {
        &self.interaction
    }

    pub fn is_distribution_dependent(&self) -> bool {
        !matches!(self.interaction, Interaction::None) && self.frozen.is_none()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen.is_some()
    }

    /// Same coefficients with the measure argument pinned to `gamma`.
    pub fn frozen_at(&self, gamma: EmpiricalMeasure) -> Self {
        let mut m = self.clone();
        m.frozen = Some(Arc::new(gamma));
        m
    }

    pub fn b1_at(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some(b1) = &self.b1 {
            b1(x, out);
        }
    }

    /// Summarises a point cloud (uniform weights) for repeated drift evaluation.
    pub fn summarize<'a>(&'a self, dim: usize, points: &'a [f64]) -> MeasureSummary<'a> {
        if let Some(g) = &self.frozen {
            return summary_of(&self.interaction, g.dim(), g.points(), Some(g.weights()));
        }
        summary_of(&self.interaction, dim, points, None)
    }

    pub fn summarize_measure<'a>(&'a self, mu: &'a EmpiricalMeasure) -> MeasureSummary<'a> {
        if let Some(g) = &self.frozen {
            return summary_of(&self.interaction, g.dim(), g.points(), Some(g.weights()));
        }
        summary_of(&self.interaction, mu.dim(), mu.points(), Some(mu.weights()))
    }

    /// Writes `b0(x) + b1(x) + ∫ W(x, z) μ(dz)` into `out`.
    #[inline(always)]
    pub fn drift_into(&self, x: &[f64], summary: &MeasureSummary<'_>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some(b1) = &self.b1 {
            b1(x, out);
        }
        if let Some(b0) = &self.b0 {
            b0(x, out);
        }
        match (&self.interaction, summary) {
            (Interaction::Affine { beta }, MeasureSummary::Mean(m)) => {
                for i in 0..out.len() {
                    out[i] -= beta * (x[i] - m[i]);
                }
            }
            (Interaction::Kernel { w, .. }, MeasureSummary::Cloud { dim, points, weights }) => {
                let n = points.len() / dim;
                let mut acc = vec![0.0; out.len()];
                let mut tmp = vec![0.0; out.len()];
                for (j, z) in points.chunks_exact(*dim).enumerate() {
                    tmp.iter_mut().for_each(|v| *v = 0.0);
                    w(x, z, &mut tmp);
                    let wt = weights.map_or(1.0 / n as f64, |ws| ws[j]);
                    for (a, t) in acc.iter_mut().zip(&tmp) {
                        *a += wt * t;
                    }
                }
                for (o, a) in out.iter_mut().zip(acc) {
                    *o += a;
                }
            }
            _ => {}
        }
    }

    /// `b(x, μ)`; a non-finite value is an error carrying `x`.
    pub fn drift(&self, x: &[f64], mu: &EmpiricalMeasure) -> Result<Vec<f64>> {
        crate::error::check_dim(self.dim, x.len())?;
        if mu.is_empty() {
            return Err(Error::InvalidParameter("measure must be non-empty".into()));
        }
        let summary = self.summarize_measure(mu);
        let mut out = vec![0.0; self.dim];
        self.drift_into(x, &summary, &mut out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::ModelEvaluation { x: x.to_vec() });
        }
        Ok(out)
    }

    /// `σ(x)`; constant and distribution-free for every supported model.
    pub fn sigma(&self, x: &[f64]) -> Matrix {
        self.diffusion.matrix_at(x)
    }

    /// Largest sampled `|W(x, z)|` over pairs of `points` for a bounded kernel,
    /// with a warning when it exceeds the declared bound.
    pub fn kernel_bound_warning(&self, points: &[Vec<f64>]) -> Option<String> {
        let Interaction::Kernel { w, bound: Some(bound) } = &self.interaction else {
            return None;
        };
        let mut worst: f64 = 0.0;
        let mut tmp = vec![0.0; self.dim];
        for x in points {
            for z in points {
                tmp.iter_mut().for_each(|v| *v = 0.0);
                w(x, z, &mut tmp);
                worst = worst.max(norm(&tmp));
            }
        }
        (worst > *bound).then(|| format!("sampled |W| = {worst:.4e} exceeds declared bound {bound:.4e}"))
    }
}

fn summary_of<'a>(
    interaction: &Interaction,
    dim: usize,
    points: &'a [f64],
    weights: Option<&'a [f64]>,
) -> MeasureSummary<'a> {
    match interaction {
        Interaction::None => MeasureSummary::Nothing,
        Interaction::Affine { .. } => {
            let n = points.len() / dim;
            let mean = (0..dim)
                .map(|k| {
                    let terms: Vec<f64> =
                        (0..n).map(|j| points[j * dim + k] * weights.map_or(1.0 / n as f64, |w| w[j])).collect();
                    pairwise_sum(&terms)
                })
                .collect();
            MeasureSummary::Mean(mean)
        }
        Interaction::Kernel { .. } => MeasureSummary::Cloud { dim, points, weights },
    }
}

/// Scalar piecewise polynomial `f(x) = Σ_k c_k (x − from)^k` on consecutive pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(deny_unknown_fields)]
pub struct PolyPiece {
    pub from: f64,
    pub to: f64,
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(transparent)]
pub struct PiecewisePolynomial {
    pub pieces: Vec<PolyPiece>,
}

impl PiecewisePolynomial {
    pub fn validate(&self) -> Result<()> {
        if self.pieces.is_empty() {
            return Err(Error::InvalidModel("piecewise polynomial needs at least one piece".into()));
        }
        for w in self.pieces.windows(2) {
            if w[0].to != w[1].from {
                return Err(Error::InvalidModel("pieces must be contiguous".into()));
            }
        }
        if self.pieces.iter().any(|p| !(p.from < p.to) || p.coeffs.is_empty()) {
            return Err(Error::InvalidModel("each piece needs from < to and coefficients".into()));
        }
        Ok(())
    }

    /// Evaluates at `x`; outside the covered range the nearest end piece is extended.
    pub fn eval(&self, x: f64) -> f64 {
        let piece = self.pieces.iter().find(|p| x < p.to).unwrap_or_else(|| self.pieces.last().expect("validated"));
        let t = x - piece.from;
        piece.coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }
}

/// Built-in models selectable by name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum BuiltinModel {
    /// `b(x) = −x`.
    Ou {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// `b(x) = x − x³` componentwise.
    DoubleWell {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// `b(x) = −(1 + |x|²) x` with `W(x, z) = −β (x − z)`.
    GranularMedia {
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// `b(x, μ) = −x − β (x − mean μ)`.
    MeanFieldOu {
        #[serde(default = "default_beta")]
        beta: f64,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// `b(x) = −x + a·1{|x| ≤ 1}·x(1 − |x|)`: repulsive near the origin for `a > 1`.
    PartialDissipative {
        #[serde(default = "default_bump")]
        bump: f64,
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    /// One-dimensional drift from piecewise-polynomial tables.
    Custom {
        #[serde(default)]
        b0: Option<PiecewisePolynomial>,
        b1: PiecewisePolynomial,
        #[serde(default)]
        beta: Option<f64>,
        #[serde(default = "default_alpha")]
        alpha: f64,
        #[serde(default)]
        sigma_hat: Option<Vec<Vec<f64>>>,
    },
}

fn default_alpha() -> f64 {
    2.0
}
fn default_beta() -> f64 {
    0.1
}
fn default_bump() -> f64 {
    2.0
}

impl BuiltinModel {
    pub fn build(&self, dim: usize) -> Result<ModelSpec> {
        let m = match self {
            BuiltinModel::Ou { alpha } => {
                ModelSpec::new("ou", dim, Diffusion::isotropic(*alpha))?.with_b1(Arc::new(|x, out| {
                    for (o, v) in out.iter_mut().zip(x) {
                        *o += -v;
                    }
                }))
            }
            BuiltinModel::DoubleWell { alpha } => ModelSpec::new("double_well", dim, Diffusion::isotropic(*alpha))?
                .with_b1(Arc::new(|x, out| {
                    for (o, v) in out.iter_mut().zip(x) {
                        *o += v - v * v * v;
                    }
                })),
            BuiltinModel::GranularMedia { beta, alpha } => {
                ModelSpec::new("granular_media", dim, Diffusion::isotropic(*alpha))?
                    .with_b1(Arc::new(|x, out| {
                        let r2 = dot(x, x);
                        for (o, v) in out.iter_mut().zip(x) {
                            *o += -(1.0 + r2) * v;
                        }
                    }))
                    .with_interaction(Interaction::Affine { beta: *beta })
            }
            BuiltinModel::MeanFieldOu { beta, alpha } => {
                ModelSpec::new("mean_field_ou", dim, Diffusion::isotropic(*alpha))?
                    .with_b1(Arc::new(|x, out| {
                        for (o, v) in out.iter_mut().zip(x) {
                            *o += -v;
                        }
                    }))
                    .with_interaction(Interaction::Affine { beta: *beta })
            }
            BuiltinModel::PartialDissipative { bump, alpha } => {
                let bump = *bump;
                ModelSpec::new("partial_dissipative", dim, Diffusion::isotropic(*alpha))?.with_b1(Arc::new(
                    move |x, out| {
                        let r = norm(x);
                        let extra = if r <= 1.0 { bump * (1.0 - r) } else { 0.0 };
                        for (o, v) in out.iter_mut().zip(x) {
                            *o += (-1.0 + extra) * v;
                        }
                    },
                ))
            }
            BuiltinModel::Custom { b0, b1, beta, alpha, sigma_hat } => {
                if dim != 1 {
                    return Err(Error::InvalidModel("custom tabulated models are one-dimensional".into()));
                }
                b1.validate()?;
                let hat = sigma_hat.as_ref().map(|rows| Matrix::from_rows(rows)).transpose()?;
                let b1 = b1.clone();
                let mut m = ModelSpec::new("custom", 1, Diffusion::Split { alpha: *alpha, hat })?
                    .with_b1(Arc::new(move |x, out| out[0] += b1.eval(x[0])));
                if let Some(b0) = b0 {
                    b0.validate()?;
                    let b0 = b0.clone();
                    m = m.with_b0(Arc::new(move |x, out| out[0] += b0.eval(x[0])));
                }
                if let Some(beta) = beta {
                    m = m.with_interaction(Interaction::Affine { beta: *beta });
                }
                m
            }
        };
        Ok(m)
    }
}

/// Concave-type distance profile `ψ` for the transport cost `W_ψ`.
#[derive(Clone)]
pub struct PsiProfile {
    pub name: String,
    psi: ScalarFn,
    dpsi: ScalarFn,
    d2psi: ScalarFn,
    pub kappa: f64,
    /// Declared `‖ψ'‖_∞`; infinite when the derivative is unbounded.
    pub sup_psi_prime: f64,
}

impl fmt::Debug for PsiProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PsiProfile({}, κ = {}, sup ψ' = {})", self.name, self.kappa, self.sup_psi_prime)
    }
}

impl PsiProfile {
    pub fn new(
        name: impl Into<String>,
        psi: ScalarFn,
        dpsi: ScalarFn,
        d2psi: ScalarFn,
        kappa: f64,
        sup_psi_prime: f64,
    ) -> Self {
        Self { name: name.into(), psi, dpsi, d2psi, kappa, sup_psi_prime }
    }

    /// `ψ(r) = r`, `κ = 1`.
    pub fn linear() -> Self {
        Self::new("linear", Arc::new(|r| r), Arc::new(|_| 1.0), Arc::new(|_| 0.0), 1.0, 1.0)
    }

    /// `ψ(r) = 1 − e^{−r}`, `κ = 1`.
    pub fn saturating() -> Self {
        Self::new(
            "saturating",
            Arc::new(|r: f64| -(-r).exp_m1()),
            Arc::new(|r: f64| (-r).exp()),
            Arc::new(|r: f64| -(-r).exp()),
            1.0,
            1.0,
        )
    }

    /// `ψ(r) = r²`; never in `Ψ_κ` since `ψ'` is unbounded.
    pub fn quadratic(kappa: f64) -> Self {
        Self::new("quadratic", Arc::new(|r| r * r), Arc::new(|r| 2.0 * r), Arc::new(|_| 2.0), kappa, f64::INFINITY)
    }

    #[inline]
    pub fn psi(&self, r: f64) -> f64 {
        (self.psi)(r)
    }

    pub fn dpsi(&self, r: f64) -> f64 {
        (self.dpsi)(r)
    }

    pub fn d2psi(&self, r: f64) -> f64 {
        (self.d2psi)(r)
    }
}

/// Lyapunov data for the drift condition: `V ≥ 1` with gradient and Hessian,
/// increasing `Φ ≥ 1`, and the constants `K`, `ε`.
#[derive(Clone)]
pub struct LyapunovSpec {
    pub name: String,
    v: PointFn,
    grad: VectorField,
    hess: VectorField,
    phi: ScalarFn,
    pub k: f64,
    pub eps: f64,
}

impl fmt::Debug for LyapunovSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LyapunovSpec({}, K = {}, ε = {})", self.name, self.k, self.eps)
    }
}

/// Default `ε` of the drift condition.
pub const DEFAULT_LYAPUNOV_EPS: f64 = 0.01;

impl LyapunovSpec {
    pub fn new(
        name: impl Into<String>,
        v: PointFn,
        grad: VectorField,
        hess: VectorField,
        phi: ScalarFn,
        k: f64,
        eps: f64,
    ) -> Result<Self> {
        if !(eps > 0.0 && eps < 1.0) {
            return Err(Error::InvalidParameter("ε must lie in (0, 1)".into()));
        }
        Ok(Self { name: name.into(), v, grad, hess, phi, k, eps })
    }

    /// `V(x) = 1 + |x|²`.
    pub fn quadratic(phi: ScalarFn, k: f64, eps: f64) -> Result<Self> {
        Self::new(
            "1+|x|^2",
            Arc::new(|x| 1.0 + dot(x, x)),
            Arc::new(|x, out| {
                for (o, v) in out.iter_mut().zip(x) {
                    *o = 2.0 * v;
                }
            }),
            Arc::new(|x, out| {
                let d = x.len();
                out.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..d {
                    out[i * d + i] = 2.0;
                }
            }),
            phi,
            k,
            eps,
        )
    }

    /// `V = 1`, `Φ = 1`: the bounded-domain case.
    pub fn constant(k: f64, eps: f64) -> Result<Self> {
        Self::new(
            "1",
            Arc::new(|_| 1.0),
            Arc::new(|_, out| out.iter_mut().for_each(|v| *v = 0.0)),
            Arc::new(|_, out| out.iter_mut().for_each(|v| *v = 0.0)),
            Arc::new(|_| 1.0),
            k,
            eps,
        )
    }

    pub fn v(&self, x: &[f64]) -> f64 {
        (self.v)(x)
    }

    pub fn phi(&self, r: f64) -> f64 {
        (self.phi)(r)
    }

    fn grad_plus_hess(&self, x: &[f64]) -> f64 {
        let d = x.len();
        let mut g = vec![0.0; d];
        let mut h = vec![0.0; d * d];
        (self.grad)(x, &mut g);
        (self.hess)(x, &mut h);
        norm(&g) + norm(&h)
    }

    /// Whether `V` grows without bound along the `±e_i` rays (sampled out to `r_max`).
    pub fn grows_along_rays(&self, dim: usize, r_max: f64) -> bool {
        (0..dim).all(|i| {
            [1.0, -1.0].iter().all(|s| {
                let at = |r: f64| {
                    let mut x = vec![0.0; dim];
                    x[i] = s * r;
                    self.v(&x)
                };
                let samples: Vec<f64> = (0..=20).map(|k| at(r_max * k as f64 / 20.0)).collect();
                samples.windows(2).all(|w| w[1] >= w[0]) && samples[20] > 10.0 * samples[0]
            })
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub point: Vec<f64>,
    /// `rhs − lhs`; negative means violated.
    pub slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConditionReport {
    pub condition: String,
    pub pass: bool,
    pub checked: usize,
    pub min_slack: f64,
    pub violations: Vec<Violation>,
    pub params: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

impl ConditionReport {
    fn from_slacks(condition: &str, points: Vec<Vec<f64>>, slacks: Vec<f64>, params: Vec<(String, f64)>) -> Self {
        let violations: Vec<Violation> = points
            .into_iter()
            .zip(&slacks)
            .filter(|(_, s)| **s < 0.0)
            .map(|(point, s)| Violation { point, slack: *s })
            .collect();
        Self {
            condition: condition.to_string(),
            pass: violations.is_empty(),
            checked: slacks.len(),
            min_slack: slacks.iter().cloned().fold(f64::INFINITY, f64::min),
            violations,
            params,
            warnings: Vec::new(),
        }
    }
}

/// Rounding allowance for exact-equality cases in the certificates.
fn allowance(scale: f64) -> f64 {
    1e-12 * scale.abs().max(1.0)
}

/// `⟨b⁽¹⁾(x), x⟩ ≤ c₁ − c₂ φ(|x|²)` and `|b⁽¹⁾(x)| ≤ c₁ φ(|x|²)` on every grid point.
pub fn check_b1<P: Fn(f64) -> f64 + Sync>(
    model: &ModelSpec,
    phi: P,
    c1: f64,
    c2: f64,
    grid: &[Vec<f64>],
) -> ConditionReport {
    let slacks: Vec<f64> = grid
        .par_iter()
        .map(|x| {
            let mut b = vec![0.0; x.len()];
            model.b1_at(x, &mut b);
            let ph = phi(dot(x, x));
            let s1 = c1 - c2 * ph - dot(&b, x);
            let s2 = c1 * ph - norm(&b);
            let s1 = if s1 >= -allowance(c2 * ph) { s1.max(0.0) } else { s1 };
            let s2 = if s2 >= -allowance(c1 * ph) { s2.max(0.0) } else { s2 };
            s1.min(s2)
        })
        .collect();
    ConditionReport::from_slacks("B1", grid.to_vec(), slacks, vec![("c1".into(), c1), ("c2".into(), c2)])
}

/// Stencil padding applied to the sampled local supremum.
pub const LYAPUNOV_STENCIL_PAD: f64 = 1.1;

/// The Lyapunov drift condition
/// `⟨b⁽¹⁾, ∇V⟩(x) + ε|b⁽¹⁾(x)| sup_{B(x,ε)}(|∇V| + |∇²V|) ≤ K − ε Φ(V(x))`.
/// The supremum is sampled at `x` and `x ± ε e_i` and padded by
/// [`LYAPUNOV_STENCIL_PAD`]; `|∇²V|` is the Frobenius norm.
pub fn check_lyapunov(model: &ModelSpec, lyap: &LyapunovSpec, grid: &[Vec<f64>]) -> ConditionReport {
    let eps = lyap.eps;
    let slacks: Vec<f64> = grid
        .par_iter()
        .map(|x| {
            let d = x.len();
            let mut b = vec![0.0; d];
            model.b1_at(x, &mut b);
            let mut g = vec![0.0; d];
            (lyap.grad)(x, &mut g);
            let mut local = lyap.grad_plus_hess(x);
            let mut y = x.clone();
            for i in 0..d {
                for s in [eps, -eps] {
                    y[i] = x[i] + s;
                    local = local.max(lyap.grad_plus_hess(&y));
                }
                y[i] = x[i];
            }
            let v = lyap.v(x);
            if v < 1.0 {
                return f64::NEG_INFINITY;
            }
            let lhs = dot(&b, &g) + eps * norm(&b) * LYAPUNOV_STENCIL_PAD * local;
            let rhs = lyap.k - eps * lyap.phi(v);
            rhs - lhs
        })
        .collect();
    let mut report = ConditionReport::from_slacks(
        "LYP",
        grid.to_vec(),
        slacks,
        vec![("K".into(), lyap.k), ("eps".into(), eps), ("stencil_pad".into(), LYAPUNOV_STENCIL_PAD)],
    );
    if report.violations.iter().any(|v| v.slack == f64::NEG_INFINITY) {
        report.warnings.push("V < 1 at some grid points".into());
    }
    report
}

/// One sample `(x, μ, y, ν)` for the monotonicity check.
#[derive(Debug, Clone)]
pub struct DissipativityPair {
    pub x: Vec<f64>,
    pub mu: EmpiricalMeasure,
    pub y: Vec<f64>,
    pub nu: EmpiricalMeasure,
}

/// `W₂` between the pair's measures: quantile coupling in 1D, exact assignment up to
/// [`metrics::EXACT_LIMIT`], Sinkhorn otherwise.
pub fn w2_between(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> Result<f64> {
    if mu.dim() == 1 {
        return metrics::wp_1d(mu, nu, 2.0);
    }
    if mu.len() == nu.len() && mu.is_uniform() && nu.is_uniform() && mu.len() <= metrics::EXACT_LIMIT {
        return metrics::wp_exact(mu, nu, 2.0);
    }
    let reg = metrics::default_sinkhorn_reg(mu, nu, 2.0);
    Ok(metrics::wp_sinkhorn(mu, nu, 2.0, reg, 2000)?.value)
}

/// `2⟨b(x,μ) − b(y,ν), x − y⟩ + ‖σ(x) − σ(y)‖²_HS ≤ K₁|x − y|² + K₂ W₂(μ,ν)²` on each pair.
pub fn check_dissipativity(
    model: &ModelSpec,
    k1: f64,
    k2: f64,
    pairs: &[DissipativityPair],
) -> Result<ConditionReport> {
    let slacks: Vec<f64> = pairs
        .par_iter()
        .map(|p| -> Result<f64> {
            let bx = model.drift(&p.x, &p.mu)?;
            let by = model.drift(&p.y, &p.nu)?;
            let diff: Vec<f64> = p.x.iter().zip(&p.y).map(|(a, b)| a - b).collect();
            let db: Vec<f64> = bx.iter().zip(&by).map(|(a, b)| a - b).collect();
            let sx = model.sigma(&p.x);
            let sy = model.sigma(&p.y);
            let hs = dist_sq(&sx.data, &sy.data);
            let w2 = w2_between(&p.mu, &p.nu)?;
            let lhs = 2.0 * dot(&db, &diff) + hs;
            let rhs = k1 * dot(&diff, &diff) + k2 * w2 * w2;
            let s = rhs - lhs;
            Ok(if s >= -allowance(lhs.abs().max(rhs.abs())) { s.max(0.0) } else { s })
        })
        .collect::<Result<_>>()?;
    let points = pairs.iter().map(|p| [p.x.clone(), p.y.clone()].concat()).collect();
    Ok(ConditionReport::from_slacks("DSS", points, slacks, vec![("K1".into(), k1), ("K2".into(), k2)]))
}

/// Tolerance of the `Ψ_κ` membership test.
pub const PSI_CLASS_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PsiClassReport {
    pub zero_at_origin: bool,
    pub increasing: bool,
    pub bounded_derivative: bool,
    pub growth_condition: bool,
}

impl PsiClassReport {
    pub fn pass(&self) -> bool {
        self.zero_at_origin && self.increasing && self.bounded_derivative && self.growth_condition
    }
}

/// The four `Ψ_κ` conditions on a grid of positive radii:
/// `ψ(0) = 0`, `ψ' > 0`, `‖ψ'‖_∞ < ∞` (checked against the declared bound), and
/// `rψ'(r) + r²(ψ'')⁺(r) ≤ κψ(r)`.
pub fn psi_class_report(profile: &PsiProfile, grid: &[f64]) -> PsiClassReport {
    let tol = |scale: f64| PSI_CLASS_TOL * scale.abs().max(1.0);
    let zero_at_origin = profile.psi(0.0).abs() <= PSI_CLASS_TOL;
    let increasing = grid.iter().all(|&r| r > 0.0 && profile.dpsi(r) > 0.0);
    let sup = profile.sup_psi_prime;
    let bounded_derivative = sup.is_finite() && grid.iter().all(|&r| profile.dpsi(r) <= sup + tol(sup));
    let growth_condition = grid.iter().all(|&r| {
        let lhs = r * profile.dpsi(r) + r * r * profile.d2psi(r).max(0.0);
        let rhs = profile.kappa * profile.psi(r);
        lhs <= rhs + tol(rhs)
    });
    PsiClassReport { zero_at_origin, increasing, bounded_derivative, growth_condition }
}

pub fn check_psi_class(profile: &PsiProfile, grid: &[f64]) -> bool {
    psi_class_report(profile, grid).pass()
}

/// Geometric grid of radii in `[lo, hi]`.
pub fn radius_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let ratio = (hi / lo).powf(1.0 / (n.max(2) - 1) as f64);
    (0..n).map(|k| lo * ratio.powi(k as i32)).collect()
}

/// Uniform grid of `n` points in `[lo, hi]` as 1D points.
pub fn line_grid(lo: f64, hi: f64, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|k| vec![lo + (hi - lo) * k as f64 / (n.max(2) - 1) as f64]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ou() -> ModelSpec {
        BuiltinModel::Ou { alpha: 2.0 }.build(1).unwrap()
    }

    fn dirac(x: f64, n: usize) -> EmpiricalMeasure {
        EmpiricalMeasure::from_values(&vec![x; n]).unwrap()
    }

    #[test]
    fn drift_examples() {
        assert_eq!(ou().drift(&[2.0], &dirac(7.0, 3)).unwrap(), vec![-2.0]);

        // W(x,z) = −β(x−z) against δ_0 at x = 1: b(1) − β with b(1) = −(1+1)·1
        let beta = 0.3;
        let gm = BuiltinModel::GranularMedia { beta, alpha: 2.0 }.build(1).unwrap();
        let got = gm.drift(&[1.0], &dirac(0.0, 5)).unwrap()[0];
        assert!((got - (-2.0 - beta)).abs() < 1e-15);

        let mf = BuiltinModel::MeanFieldOu { beta: 0.1, alpha: 2.0 }.build(1).unwrap();
        let mu = EmpiricalMeasure::from_values(&[0.0, 1.0, 0.25, 0.75]).unwrap();
        let got = mf.drift(&[1.0], &mu).unwrap()[0];
        assert!((got + 1.05).abs() < 1e-15);
    }

    #[test]
    fn general_kernel_matches_affine() {
        let beta = 0.4;
        let affine = BuiltinModel::MeanFieldOu { beta, alpha: 2.0 }.build(2).unwrap();
        let kernel = BuiltinModel::Ou { alpha: 2.0 }.build(2).unwrap().with_interaction(Interaction::Kernel {
            w: Arc::new(move |x, z, out| {
                for i in 0..x.len() {
                    out[i] += -beta * (x[i] - z[i]);
                }
            }),
            bound: None,
        });
        let mu = EmpiricalMeasure::uniform(2, vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.5]).unwrap();
        let a = affine.drift(&[0.3, -0.2], &mu).unwrap();
        let b = kernel.drift(&[0.3, -0.2], &mu).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_drift_is_reported() {
        let bad = ModelSpec::new("bad", 1, Diffusion::isotropic(1.0))
            .unwrap()
            .with_b1(Arc::new(|x, out| out[0] += 1.0 / x[0]));
        match bad.drift(&[0.0], &dirac(0.0, 1)) {
            Err(Error::ModelEvaluation { x }) => assert_eq!(x, vec![0.0]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn frozen_model_ignores_current_measure() {
        let mf = BuiltinModel::MeanFieldOu { beta: 0.5, alpha: 2.0 }.build(1).unwrap();
        let frozen = mf.frozen_at(dirac(1.0, 2));
        assert!(!frozen.is_distribution_dependent());
        let a = frozen.drift(&[0.0], &dirac(-10.0, 3)).unwrap()[0];
        assert!((a - 0.5).abs() < 1e-15);
    }

    #[test]
    fn split_diffusion_reconstructs_covariance() {
        let hat = Matrix::from_rows(&[vec![0.5, 0.1], vec![-0.2, 0.3]]).unwrap();
        let alpha = 0.7;
        let diff = Diffusion::Split { alpha, hat: Some(hat.clone()) };
        let direct = diff.matrix_at(&[0.0, 0.0]).gram();
        let hh = hat.gram();
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { alpha } else { 0.0 } + hh.get(i, j);
                assert!((direct.get(i, j) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn piecewise_polynomial_eval() {
        let p = PiecewisePolynomial {
            pieces: vec![
                PolyPiece { from: -1.0, to: 0.0, coeffs: vec![1.0] },
                PolyPiece { from: 0.0, to: 1.0, coeffs: vec![-1.0, 0.0, 2.0] },
            ],
        };
        p.validate().unwrap();
        assert_eq!(p.eval(-0.5), 1.0);
        assert_eq!(p.eval(0.5), -1.0 + 2.0 * 0.25);
        assert_eq!(p.eval(3.0), -1.0 + 2.0 * 9.0);
        let broken = PiecewisePolynomial {
            pieces: vec![
                PolyPiece { from: 0.0, to: 1.0, coeffs: vec![1.0] },
                PolyPiece { from: 2.0, to: 3.0, coeffs: vec![1.0] },
            ],
        };
        assert!(broken.validate().is_err());
    }

    #[test]
    fn b1_examples() {
        let grid = line_grid(-10.0, 10.0, 401);
        let r = check_b1(&ou(), |r| 1.0 + r, 1.0, 0.5, &grid);
        assert!(r.pass, "{r:?}");

        let anti =
            ModelSpec::new("anti", 1, Diffusion::isotropic(2.0)).unwrap().with_b1(Arc::new(|x, out| out[0] += x[0]));
        let r = check_b1(&anti, |r| 1.0 + r, 1.0, 0.5, &grid);
        assert!(!r.pass);
        assert!(r.violations.iter().all(|v| v.point[0].abs() > 0.0));

        // b1 = −(1+x²)x, φ(r) = 1 + r, c2 = 1 on [−10, 10]: the growth bound
        // (1+x²)|x| ≤ c1(1+x²) needs c1 ≥ 10
        let ex = ModelSpec::new("ex11", 1, Diffusion::isotropic(2.0))
            .unwrap()
            .with_b1(Arc::new(|x, out| out[0] += -(1.0 + x[0] * x[0]) * x[0]));
        let r = check_b1(&ex, |r| 1.0 + r, 10.0, 1.0, &grid);
        assert!(r.pass, "{:?}", r.violations.first());
    }

    #[test]
    fn lyapunov_examples() {
        let grid = line_grid(-5.0, 5.0, 201);
        let lyap = LyapunovSpec::quadratic(Arc::new(|r| r), 10.0, 0.01).unwrap();
        let r = check_lyapunov(&ou(), &lyap, &grid);
        assert!(r.pass, "{r:?}");

        let zero = ModelSpec::new("zero", 1, Diffusion::isotropic(2.0)).unwrap();
        let r = check_lyapunov(&zero, &lyap, &[vec![50.0], vec![-50.0]]);
        assert!(!r.pass);
        assert_eq!(r.violations.len(), 2);

        let interval_model = ModelSpec::new("bounded", 1, Diffusion::isotropic(2.0))
            .unwrap()
            .with_b1(Arc::new(|x, out| out[0] += x[0].sin()));
        let r = check_lyapunov(&interval_model, &LyapunovSpec::constant(1.0, 0.01).unwrap(), &line_grid(0.0, 1.0, 11));
        assert!(r.pass);
    }

    #[test]
    fn lyapunov_rays() {
        let lyap = LyapunovSpec::quadratic(Arc::new(|r| r), 10.0, 0.01).unwrap();
        assert!(lyap.grows_along_rays(2, 100.0));
        assert!(!LyapunovSpec::constant(1.0, 0.01).unwrap().grows_along_rays(1, 100.0));
    }

    #[test]
    fn psi_class_examples() {
        let grid = radius_grid(1e-6, 1e2, 2000);
        assert!(check_psi_class(&PsiProfile::linear(), &grid));
        assert!(check_psi_class(&PsiProfile::saturating(), &grid));
        for kappa in [0.5, 1.0, 2.0, 10.0, 1e6] {
            assert!(!check_psi_class(&PsiProfile::quadratic(kappa), &grid));
        }
        // a finite declared bound is still exceeded by ψ' = 2r on the grid
        let mut q = PsiProfile::quadratic(3.0);
        q.sup_psi_prime = 100.0;
        assert!(!psi_class_report(&q, &grid).bounded_derivative);
    }

    #[test]
    fn dissipativity_examples() {
        let mu = EmpiricalMeasure::from_values(&[0.0, 1.0]).unwrap();
        let nu = EmpiricalMeasure::from_values(&[3.0, -2.0, 0.5]).unwrap();
        let pairs = vec![
            DissipativityPair { x: vec![1.0], mu: mu.clone(), y: vec![-2.0], nu: nu.clone() },
            DissipativityPair { x: vec![0.3], mu: mu.clone(), y: vec![0.3], nu: mu.clone() },
        ];
        let r = check_dissipativity(&ou(), -2.0, 0.0, &pairs).unwrap();
        assert!(r.pass, "{r:?}");
        let r = check_dissipativity(&ou(), -2.5, 0.0, &pairs[..1]).unwrap();
        assert!(!r.pass);
    }
}

//! 1D finite-volume solver for the granular media equation
//! `∂ₜρ = DΔρ − ∂ₓ{ρ b + ρ (W * ρ)}` on `[a, b]` with no-flux boundaries.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Diffusion, Interaction, MeasureSummary, ModelSpec};
use crate::particle::{csv_float, Ensemble};
use crate::rng::{NoiseSource, Stream};

/// Fraction of the stability limit `min(h²/(2D), h/max|v|)` allowed per step.
pub const CFL_FRACTION: f64 = 0.4;

/// Leakage above which [`l1_against_particles`] warns.
pub const LEAKAGE_WARN: f64 = 1e-3;

/// Cell-averaged density on a uniform grid of `[lower, upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub lower: f64,
    pub upper: f64,
    pub density: Vec<f64>,
    pub time: f64,
}

impl DensityGrid {
    pub fn uniform(lower: f64, upper: f64, cells: usize) -> Result<Self> {
        Self::from_fn(lower, upper, cells, |_| 1.0)
    }

    /// Samples `f` at the cell centres and normalises to unit mass.
    pub fn from_fn(lower: f64, upper: f64, cells: usize, f: impl Fn(f64) -> f64) -> Result<Self> {
        if !(upper > lower) || cells < 2 {
            return Err(Error::InvalidParameter("need lower < upper and at least two cells".into()));
        }
        let h = (upper - lower) / cells as f64;
        let density: Vec<f64> = (0..cells).map(|i| f(lower + (i as f64 + 0.5) * h)).collect();
        Self::from_cells(lower, upper, density)
    }

    /// Cell averages, rescaled to unit mass.
    pub fn from_cells(lower: f64, upper: f64, mut density: Vec<f64>) -> Result<Self> {
        if !(upper > lower) || density.len() < 2 {
            return Err(Error::InvalidParameter("need lower < upper and at least two cells".into()));
        }
        if density.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("density must be finite and nonnegative".into()));
        }
        let h = (upper - lower) / density.len() as f64;
        let mass: f64 = density.iter().sum::<f64>() * h;
        if !(mass > 0.0) {
            return Err(Error::InvalidParameter("density has zero mass".into()));
        }
        density.iter_mut().for_each(|v| *v /= mass);
        Ok(Self { lower, upper, density, time: 0.0 })
    }

    pub fn cells(&self) -> usize {
        self.density.len()
    }

    pub fn width(&self) -> f64 {
        (self.upper - self.lower) / self.cells() as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.lower + (i as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.cells()).map(|i| self.center(i)).collect()
    }

    pub fn mass(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.width()
    }

    pub fn mean(&self) -> f64 {
        let h = self.width();
        self.density.iter().enumerate().map(|(i, r)| self.center(i) * r).sum::<f64>() * h
    }

    fn same_grid(&self, other: &Self) -> Result<()> {
        if self.cells() != other.cells() || self.lower != other.lower || self.upper != other.upper {
            return Err(Error::InvalidParameter("density grids differ".into()));
        }
        Ok(())
    }

    /// `∫|ρ − ρ'|`.
    pub fn l1(&self, other: &Self) -> Result<f64> {
        self.same_grid(other)?;
        Ok(self.density.iter().zip(&other.density).map(|(a, b)| (a - b).abs()).sum::<f64>() * self.width())
    }

    /// `(time, cell_center, density)` rows.
    pub fn write_csv<W: Write>(&self, out: &mut W, header: bool) -> std::io::Result<()> {
        if header {
            writeln!(out, "time,cell_center,density")?;
        }
        for (i, r) in self.density.iter().enumerate() {
            writeln!(out, "{},{},{}", csv_float(self.time), csv_float(self.center(i)), csv_float(*r))?;
        }
        Ok(())
    }
}

/// Face flux discretisation of the advective term.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum FluxScheme {
    /// Donor-cell upwinding plus central diffusion; first order.
    Upwind,
    /// Exponentially fitted upwinding (Scharfetter-Gummel): reduces to
    /// upwinding at high cell Péclet number and reproduces the discrete
    /// Gibbs ratio `e^{vh/D}` at rest.
    #[default]
    ExponentialFitting,
}

#[derive(Clone)]
pub enum PdeKernel {
    None,
    /// `W(x, z) = −β(x − z)`, reduced to the grid mean.
    Affine {
        beta: f64,
    },
    /// General `W(x, z)` by midpoint quadrature, `O(M²)` per step.
    General(Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for PdeKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PdeKernel::None => write!(f, "None"),
            PdeKernel::Affine { beta } => write!(f, "Affine {{ beta: {beta} }}"),
            PdeKernel::General(_) => write!(f, "General"),
        }
    }
}

/// Coefficients of the 1D equation.
#[derive(Clone)]
pub struct GranularMedia {
    pub drift: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    pub kernel: PdeKernel,
    pub diffusion: f64,
    pub scheme: FluxScheme,
}

impl fmt::Debug for GranularMedia {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GranularMedia")
            .field("kernel", &self.kernel)
            .field("diffusion", &self.diffusion)
            .field("scheme", &self.scheme)
            .finish()
    }
}

impl GranularMedia {
    pub fn new(drift: impl Fn(f64) -> f64 + Send + Sync + 'static, kernel: PdeKernel) -> Self {
        Self { drift: Arc::new(drift), kernel, diffusion: 1.0, scheme: FluxScheme::default() }
    }

    pub fn with_diffusion(mut self, d: f64) -> Self {
        self.diffusion = d;
        self
    }

    pub fn with_scheme(mut self, scheme: FluxScheme) -> Self {
        self.scheme = scheme;
        self
    }

    /// The density equation of a 1D model: `D = α/2` for `σ = √α`.
    pub fn from_model(model: &ModelSpec) -> Result<Self> {
        if model.dim() != 1 {
            return Err(Error::InvalidParameter("the PDE solver is one-dimensional".into()));
        }
        let d = match model.diffusion() {
            Diffusion::Split { alpha, hat: None } => alpha / 2.0,
            Diffusion::Split { alpha, hat: Some(h) } => alpha / 2.0 + 0.5 * h.gram().get(0, 0),
            Diffusion::Field { .. } => {
                return Err(Error::InvalidParameter("the PDE solver needs a constant diffusion".into()));
            }
        };
        let kernel = match model.interaction() {
            Interaction::None => PdeKernel::None,
            Interaction::Affine { beta } => PdeKernel::Affine { beta: *beta },
            Interaction::Kernel { w, .. } => {
                let w = w.clone();
                PdeKernel::General(Arc::new(move |x, z| {
                    let mut out = [0.0];
                    w(&[x], &[z], &mut out);
                    out[0]
                }))
            }
        };
        let m = model.clone();
        let drift = move |x: f64| {
            let mut out = [0.0];
            m.drift_into(&[x], &MeasureSummary::Nothing, &mut out);
            out[0]
        };
        Ok(Self::new(drift, kernel).with_diffusion(d))
    }

    /// Velocity `b + W * ρ` at the `M − 1` interior faces.
    fn face_velocity(&self, grid: &DensityGrid) -> Vec<f64> {
        let h = grid.width();
        let faces = (1..grid.cells()).map(|k| grid.lower + k as f64 * h);
        match &self.kernel {
            PdeKernel::None => faces.map(|x| (self.drift)(x)).collect(),
            PdeKernel::Affine { beta } => {
                let (mass, mean) = (grid.mass(), grid.mean());
                faces.map(|x| (self.drift)(x) - beta * (x * mass - mean)).collect()
            }
            PdeKernel::General(w) => faces
                .map(|x| {
                    let conv: f64 = grid.density.iter().enumerate().map(|(j, r)| w(x, grid.center(j)) * r).sum();
                    (self.drift)(x) + conv * h
                })
                .collect(),
        }
    }

    fn stable_dt(&self, h: f64, velocity: &[f64]) -> f64 {
        let vmax = velocity.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = if self.diffusion > 0.0 { h * h / (2.0 * self.diffusion) } else { f64::INFINITY };
        let adv = if vmax > 0.0 { h / vmax } else { f64::INFINITY };
        CFL_FRACTION * diff.min(adv)
    }

    /// Largest step allowed at the current state.
    pub fn max_dt(&self, grid: &DensityGrid) -> f64 {
        self.stable_dt(grid.width(), &self.face_velocity(grid))
    }
}

/// `B(z) = z/(eᶻ − 1)`, with `B(0) = 1`.
fn bernoulli(z: f64) -> f64 {
    if z.abs() < 1e-6 {
        1.0 - 0.5 * z + z * z / 12.0
    } else {
        z / z.exp_m1()
    }
}

/// One explicit step; boundary faces carry no flux.
pub fn gm_step(grid: &DensityGrid, eq: &GranularMedia, dt: f64) -> Result<DensityGrid> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    let h = grid.width();
    let velocity = eq.face_velocity(grid);
    let limit = eq.stable_dt(h, &velocity);
    if dt > limit * (1.0 + 1e-12) {
        return Err(Error::Cfl { dt, suggested: limit });
    }
    let rho = &grid.density;
    let d = eq.diffusion;
    let flux: Vec<f64> = velocity
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let (l, r) = (rho[k], rho[k + 1]);
            match eq.scheme {
                FluxScheme::Upwind => v.max(0.0) * l + v.min(0.0) * r - d * (r - l) / h,
                FluxScheme::ExponentialFitting if d > 0.0 => {
                    let pe = v * h / d;
                    d / h * (bernoulli(-pe) * l - bernoulli(pe) * r)
                }
                FluxScheme::ExponentialFitting => v.max(0.0) * l + v.min(0.0) * r,
            }
        })
        .collect();
    let c = dt / h;
    let m = rho.len();
    let density: Vec<f64> = (0..m)
        .map(|i| {
            let left = if i == 0 { 0.0 } else { flux[i - 1] };
            let right = if i + 1 == m { 0.0 } else { flux[i] };
            // clamp roundoff-level negatives only; larger ones mean a broken step
            let v = rho[i] - c * (right - left);
            if v < 0.0 && v > -1e-14 {
                0.0
            } else {
                v
            }
        })
        .collect();
    if density.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::InvalidParameter("density lost positivity; reduce dt".into()));
    }
    Ok(DensityGrid { lower: grid.lower, upper: grid.upper, density, time: grid.time + dt })
}

/// Marches to `t_end` with the largest stable steps, landing exactly on every
/// multiple of `observe_every` (and on `t_end`); returns the observed states.
pub fn solve(grid0: &DensityGrid, eq: &GranularMedia, t_end: f64, observe_every: f64) -> Result<Vec<DensityGrid>> {
    if !(t_end >= 0.0) || !(observe_every > 0.0) {
        return Err(Error::InvalidParameter("need t_end ≥ 0 and a positive observation interval".into()));
    }
    let start = grid0.time;
    let mut grid = grid0.clone();
    let mut out = vec![grid.clone()];
    let marks = (t_end / observe_every).ceil() as usize;
    for k in 1..=marks {
        let target = start + (k as f64 * observe_every).min(t_end);
        grid = advance_to(&grid, eq, target)?;
        out.push(grid.clone());
    }
    Ok(out)
}

/// Steps until `grid.time == target`.
pub fn advance_to(grid0: &DensityGrid, eq: &GranularMedia, target: f64) -> Result<DensityGrid> {
    let mut grid = grid0.clone();
    while grid.time < target {
        let remaining = target - grid.time;
        let dt = eq.max_dt(&grid);
        if remaining <= dt * (1.0 + 1e-9) {
            grid = gm_step(&grid, eq, remaining.min(dt))?;
            grid.time = target;
        } else {
            // equal substeps avoid a sliver step at the end of each interval
            let n = (remaining / dt).ceil();
            grid = gm_step(&grid, eq, remaining / n)?;
        }
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteadyState {
    pub grid: DensityGrid,
    /// `‖ρ(t + 1) − ρ(t)‖_{L¹}` per unit time.
    pub history: Vec<f64>,
    pub converged: bool,
}

impl SteadyState {
    pub fn into_result(self) -> Result<DensityGrid> {
        if self.converged {
            Ok(self.grid)
        } else {
            Err(Error::NoConvergence {
                iterations: self.history.len(),
                last_change: self.history.last().copied().unwrap_or(f64::NAN),
            })
        }
    }
}

/// Time-marches in unit intervals until the per-unit L¹ change is below `tol`.
pub fn steady_state(grid0: &DensityGrid, eq: &GranularMedia, tol: f64, t_max: f64) -> Result<SteadyState> {
    if !(tol > 0.0) || !(t_max > 0.0) {
        return Err(Error::InvalidParameter("need tol > 0 and t_max > 0".into()));
    }
    let mut grid = grid0.clone();
    let mut history = Vec::new();
    let end = grid0.time + t_max;
    while grid.time < end {
        let next = advance_to(&grid, eq, (grid.time + 1.0).min(end))?;
        let change = next.l1(&grid)?;
        history.push(change);
        grid = next;
        if change < tol {
            return Ok(SteadyState { grid, history, converged: true });
        }
    }
    Ok(SteadyState { grid, history, converged: false })
}

/// Distance between a grid density and a particle cloud binned on its cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ParticleL1 {
    /// `Σ|ρᵢ − pᵢ/h|·h`, in `[0, 2]`.
    pub l1: f64,
    /// Half the L¹ value: the variation-norm normalisation.
    pub half_l1: f64,
    /// Fraction of particles outside the interval.
    pub leakage: f64,
    pub warning: Option<&'static str>,
}

pub fn l1_against_particles(grid: &DensityGrid, ens: &Ensemble) -> Result<ParticleL1> {
    if ens.dim() != 1 {
        return Err(Error::DimensionMismatch { expected: 1, got: ens.dim() });
    }
    l1_against_samples(grid, &ens.positions)
}

pub fn l1_against_samples(grid: &DensityGrid, samples: &[f64]) -> Result<ParticleL1> {
    if samples.is_empty() {
        return Err(Error::InvalidParameter("no samples".into()));
    }
    let m = grid.cells();
    let h = grid.width();
    let mut counts = vec![0usize; m];
    let mut outside = 0usize;
    for &x in samples {
        if !(x >= grid.lower && x <= grid.upper) {
            outside += 1;
            continue;
        }
        let k = (((x - grid.lower) / h).floor() as usize).min(m - 1);
        counts[k] += 1;
    }
    let n = samples.len() as f64;
    // leaked particles count as mass the grid does not carry
    let inside: f64 = grid.density.iter().zip(&counts).map(|(r, c)| (r * h - *c as f64 / n).abs()).sum();
    let leakage = outside as f64 / n;
    let l1 = inside + leakage;
    Ok(ParticleL1 {
        l1,
        half_l1: 0.5 * l1,
        leakage,
        warning: (leakage > LEAKAGE_WARN).then_some("more than 0.1% of particles lie outside the grid"),
    })
}

/// Deterministic inverse-CDF samples at the midpoints `(k + ½)/n` of the grid's
/// piecewise-constant law.
pub fn quantile_samples(grid: &DensityGrid, n: usize) -> Vec<f64> {
    let q = Quantile::new(grid);
    (0..n).map(|k| q.at((k as f64 + 0.5) / n as f64)).collect()
}

/// `n` i.i.d. draws from the grid's piecewise-constant law.
pub fn sample_grid(grid: &DensityGrid, n: usize, seed: u64) -> Vec<f64> {
    let q = Quantile::new(grid);
    let mut u = vec![0.0; n];
    NoiseSource::new(seed).uniforms(Stream::Auxiliary, 0, 0, &mut u);
    u.into_iter().map(|u| q.at(u)).collect()
}

struct Quantile<'a> {
    grid: &'a DensityGrid,
    cdf: Vec<f64>,
}

impl<'a> Quantile<'a> {
    fn new(grid: &'a DensityGrid) -> Self {
        let h = grid.width();
        let mut cdf = Vec::with_capacity(grid.cells() + 1);
        cdf.push(0.0);
        for r in &grid.density {
            let last = *cdf.last().expect("non-empty");
            cdf.push(last + r * h);
        }
        Self { grid, cdf }
    }

    /// The point at probability level `p ∈ [0, 1]`.
    fn at(&self, p: f64) -> f64 {
        let g = self.grid;
        let h = g.width();
        let u = p * self.cdf[g.cells()];
        let i = self.cdf.partition_point(|&c| c <= u).clamp(1, g.cells()) - 1;
        let r = g.density[i];
        let frac = if r > 0.0 { (u - self.cdf[i]) / (r * h) } else { 0.5 };
        g.lower + (i as f64 + frac.clamp(0.0, 1.0)) * h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_is_stationary_for_pure_diffusion() {
        let g = DensityGrid::uniform(0.0, 1.0, 50).unwrap();
        let eq = GranularMedia::new(|_| 0.0, PdeKernel::None);
        let out = solve(&g, &eq, 0.5, 0.5).unwrap();
        let last = out.last().unwrap();
        assert!(last.density.iter().all(|r| (r - 1.0).abs() < 1e-13));
        assert_eq!(last.time, 0.5);
    }

    #[test]
    fn cfl_violation_suggests_step() {
        let g = DensityGrid::uniform(0.0, 1.0, 100).unwrap();
        let eq = GranularMedia::new(|_| 0.0, PdeKernel::None);
        match gm_step(&g, &eq, 1e-3) {
            Err(Error::Cfl { suggested, .. }) => assert!((suggested - 0.4 * 0.5e-4).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn first_neumann_mode_decays() {
        let m = 400;
        let g = DensityGrid::from_fn(0.0, 1.0, m, |x| 1.0 + 0.1 * (std::f64::consts::PI * x).cos()).unwrap();
        let eq = GranularMedia::new(|_| 0.0, PdeKernel::None);
        let t = 0.1;
        let out = solve(&g, &eq, t, t).unwrap();
        let amp = |g: &DensityGrid| {
            let h = g.width();
            2.0 * g
                .density
                .iter()
                .enumerate()
                .map(|(i, r)| (r - 1.0) * (std::f64::consts::PI * g.center(i)).cos())
                .sum::<f64>()
                * h
        };
        let ratio = amp(out.last().unwrap()) / amp(&g);
        let want = (-std::f64::consts::PI.powi(2) * t).exp();
        assert!((ratio - want).abs() < 1e-3, "{ratio} vs {want}");
    }

    #[test]
    fn quantile_samples_reproduce_grid() {
        let g = DensityGrid::from_fn(-1.0, 1.0, 20, |x| 1.0 + x * x).unwrap();
        let s = quantile_samples(&g, 200_000);
        let d = l1_against_samples(&g, &s).unwrap();
        assert!(d.l1 < 1e-3, "{}", d.l1);
        assert_eq!(d.leakage, 0.0);
    }

    #[test]
    fn disjoint_is_two() {
        let g = DensityGrid::from_fn(0.0, 1.0, 10, |x| if x < 0.5 { 1.0 } else { 0.0 }).unwrap();
        let d = l1_against_samples(&g, &[0.75; 10]).unwrap();
        assert!((d.l1 - 2.0).abs() < 1e-12);
        assert!((d.half_l1 - 1.0).abs() < 1e-12);
    }
}

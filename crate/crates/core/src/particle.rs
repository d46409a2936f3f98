//! Interacting-particle Euler–Maruyama integration with reflection by
//! projection, plus synchronous and reflection couplings.
//!
//! Every Gaussian increment is a pure function of `(seed, step, particle,
//! stream)`, so results do not depend on how particles are split across
//! worker threads.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::geometry::{dist_sq, dot, Domain};
use crate::metrics::EmpiricalMeasure;
use crate::model::{Interaction, MeasureSummary, ModelSpec, PsiProfile, KERNEL_WARN_N};
use crate::numerics::pairwise_sum_by;
use crate::rng::{NoiseSource, Stream};

/// Particles handled per parallel task.
const CHUNK: usize = 1024;

/// Formats a float with 17 significant digits, the CSV convention throughout.
pub fn csv_float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Initial law of the particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Sampler {
    Dirac {
        point: Vec<f64>,
    },
    /// Uniform on the box `[lower, upper]`, then projected onto the domain.
    Uniform {
        lower: Vec<f64>,
        upper: Vec<f64>,
    },
    /// `N(mean, cov)` projected onto the domain.
    Gaussian {
        mean: Vec<f64>,
        cov: Vec<Vec<f64>>,
    },
    /// I.i.d. draws from the given points.
    Points {
        points: Vec<Vec<f64>>,
    },
    /// I.i.d. draws from the rows of a CSV file of coordinates.
    File {
        path: PathBuf,
    },
}

impl Sampler {
    pub fn dirac(point: Vec<f64>) -> Self {
        Sampler::Dirac { point }
    }

    pub fn gaussian_iso(mean: Vec<f64>, sd: f64) -> Self {
        let d = mean.len();
        let cov = (0..d).map(|i| (0..d).map(|j| if i == j { sd * sd } else { 0.0 }).collect()).collect();
        Sampler::Gaussian { mean, cov }
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            Sampler::Dirac { point } => Some(point.len()),
            Sampler::Uniform { lower, .. } => Some(lower.len()),
            Sampler::Gaussian { mean, .. } => Some(mean.len()),
            Sampler::Points { points } => points.first().map(Vec::len),
            Sampler::File { .. } => None,
        }
    }
}

/// Which side of a coupled pair an ensemble plays; selects the initial-law stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    X,
    Y,
}

/// N particles in the closed domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    dim: usize,
    /// Row-major `n × dim`.
    pub positions: Vec<f64>,
    /// Accumulated projection distance per particle (diagnostic only).
    pub local_time: Vec<f64>,
    pub time: f64,
    pub step_index: u64,
    pub seed: u64,
}

impl Ensemble {
    pub fn from_positions(dim: usize, positions: Vec<f64>, seed: u64) -> Result<Self> {
        if dim == 0 || positions.is_empty() || !positions.len().is_multiple_of(dim) {
            return Err(Error::InvalidParameter("positions must be a non-empty n × d array".into()));
        }
        let n = positions.len() / dim;
        Ok(Self { dim, positions, local_time: vec![0.0; n], time: 0.0, step_index: 0, seed })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.positions.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.positions[i * self.dim..(i + 1) * self.dim]
    }

    pub fn empirical(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::uniform(self.dim, self.positions.clone()).expect("ensemble is non-empty")
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len();
        (0..self.dim).map(|k| pairwise_sum_by(n, &|i| self.positions[i * self.dim + k]) / n as f64).collect()
    }

    pub fn second_moment(&self) -> f64 {
        let n = self.len();
        pairwise_sum_by(n, &|i| dot(self.particle(i), self.particle(i))) / n as f64
    }

    pub fn mean_local_time(&self) -> f64 {
        pairwise_sum_by(self.len(), &|i| self.local_time[i]) / self.len() as f64
    }

    /// `time,particle_index,x0,...` rows.
    pub fn write_csv<W: Write>(&self, mut w: W, header: bool) -> std::io::Result<()> {
        if header {
            let coords: Vec<String> = (0..self.dim).map(|k| format!("x{k}")).collect();
            writeln!(w, "time,particle_index,{}", coords.join(","))?;
        }
        let t = csv_float(self.time);
        for i in 0..self.len() {
            let coords: Vec<String> = self.particle(i).iter().map(|v| csv_float(*v)).collect();
            writeln!(w, "{t},{i},{}", coords.join(","))?;
        }
        Ok(())
    }
}

/// Draws `n` i.i.d. initial positions and projects them onto the domain.
pub fn init_ensemble(n: usize, sampler: &Sampler, domain: &Domain, seed: u64) -> Result<Ensemble> {
    init_ensemble_for(n, sampler, domain, seed, Side::X)
}

pub fn init_ensemble_for(n: usize, sampler: &Sampler, domain: &Domain, seed: u64, side: Side) -> Result<Ensemble> {
    if n == 0 {
        return Err(Error::InvalidParameter("particle count must be at least 1".into()));
    }
    domain.validate()?;
    let d = domain.dimension();
    let stream = match side {
        Side::X => Stream::InitPrimary,
        Side::Y => Stream::InitSecondary,
    };
    let rng = NoiseSource::new(seed);
    let loaded;
    let sampler = match sampler {
        Sampler::File { path } => {
            loaded = Sampler::Points { points: read_points(path)? };
            &loaded
        }
        other => other,
    };
    if let Some(sd) = sampler.dim() {
        check_dim(d, sd)?;
    }
    let mut positions = vec![0.0; n * d];
    match sampler {
        Sampler::Dirac { point } => {
            if !domain.contains(point)? {
                return Err(Error::DisjointSampler);
            }
            for x in positions.chunks_exact_mut(d) {
                x.copy_from_slice(point);
            }
        }
        Sampler::Uniform { lower, upper } => {
            if lower.iter().zip(upper).any(|(l, u)| !(l <= u)) {
                return Err(Error::InvalidParameter("uniform region needs lower ≤ upper".into()));
            }
            let region = Domain::cuboid(lower.clone(), upper.clone())?;
            if set_distance(&region, domain) > domain.default_tol() {
                return Err(Error::DisjointSampler);
            }
            positions.par_chunks_mut(d).enumerate().for_each(|(i, x)| {
                rng.uniforms(stream, 0, i as u64, x);
                for (v, (l, u)) in x.iter_mut().zip(lower.iter().zip(upper)) {
                    *v = l + (u - l) * *v;
                }
            });
        }
        Sampler::Gaussian { mean, cov } => {
            let chol = cholesky(cov, d)?;
            positions.par_chunks_mut(d).enumerate().for_each(|(i, x)| {
                let mut z = vec![0.0; d];
                rng.normals(stream, 0, i as u64, &mut z);
                for r in 0..d {
                    x[r] = mean[r] + (0..=r).map(|c| chol[r * d + c] * z[c]).sum::<f64>();
                }
            });
        }
        Sampler::Points { points } => {
            if points.is_empty() {
                return Err(Error::InvalidParameter("point sampler needs at least one point".into()));
            }
            if points.iter().any(|p| p.len() != d) {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: points.iter().map(Vec::len).find(|l| *l != d).unwrap_or(0),
                });
            }
            positions.par_chunks_mut(d).enumerate().for_each(|(i, x)| {
                let mut u = [0.0];
                rng.uniforms(stream, 0, i as u64, &mut u);
                let k = ((u[0] * points.len() as f64) as usize).min(points.len() - 1);
                x.copy_from_slice(&points[k]);
            });
        }
        Sampler::File { .. } => unreachable!("loaded above"),
    }
    positions.par_chunks_mut(d).for_each(|x| {
        domain.project_in_place(x);
    });
    Ensemble::from_positions(d, positions, seed)
}

fn read_points(path: &std::path::Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidParameter(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        match row {
            Ok(r) => out.push(r),
            // tolerate one header line
            Err(_) if out.is_empty() && lineno == 0 => {}
            Err(e) => return Err(Error::InvalidParameter(format!("{}:{}: {e}", path.display(), lineno + 1))),
        }
    }
    Ok(out)
}

/// Distance between two closed convex sets by alternating projections.
fn set_distance(a: &Domain, b: &Domain) -> f64 {
    let mut x = vec![0.0; a.dimension()];
    a.project_in_place(&mut x);
    let mut gap = f64::INFINITY;
    for _ in 0..2000 {
        let mut y = x.clone();
        b.project_in_place(&mut y);
        let mut z = y.clone();
        a.project_in_place(&mut z);
        let g = dist_sq(&z, &y).sqrt();
        if (gap - g).abs() <= 1e-14 * gap.max(1.0) {
            return g;
        }
        gap = g;
        x = z;
    }
    gap
}

fn cholesky(cov: &[Vec<f64>], d: usize) -> Result<Vec<f64>> {
    if cov.len() != d || cov.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidParameter("covariance must be d × d".into()));
    }
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = cov[i][i] - s;
                if v < 0.0 {
                    return Err(Error::InvalidParameter("covariance is not positive semi-definite".into()));
                }
                l[i * d + j] = v.sqrt();
            } else {
                let diag = l[j * d + j];
                l[i * d + j] = if diag > 0.0 { (cov[i][j] - s) / diag } else { 0.0 };
            }
        }
    }
    Ok(l)
}

/// Per-step interaction statistics that do not borrow the ensemble.
enum Prepared<'a> {
    Owned(MeasureSummary<'static>),
    Borrowed(MeasureSummary<'a>),
}

impl Prepared<'_> {
    fn get(&self) -> &MeasureSummary<'_> {
        match self {
            Prepared::Owned(s) => s,
            Prepared::Borrowed(s) => s,
        }
    }
}

fn needs_snapshot(model: &ModelSpec) -> bool {
    matches!(model.interaction(), Interaction::Kernel { .. }) && !model.is_frozen()
}

fn prepare<'a>(model: &'a ModelSpec, ens: &Ensemble, snapshot: &'a [f64]) -> Prepared<'a> {
    if needs_snapshot(model) {
        return Prepared::Borrowed(model.summarize(ens.dim, snapshot));
    }
    match model.summarize(ens.dim, &ens.positions) {
        MeasureSummary::Nothing => Prepared::Owned(MeasureSummary::Nothing),
        MeasureSummary::Mean(m) => Prepared::Owned(MeasureSummary::Mean(m)),
        // frozen kernel models borrow from the model, not the ensemble
        MeasureSummary::Cloud { .. } => Prepared::Borrowed(model.summarize(ens.dim, snapshot)),
    }
}

fn check_model(ens: &Ensemble, model: &ModelSpec, domain: &Domain, dt: f64) -> Result<()> {
    check_dim(domain.dimension(), ens.dim)?;
    check_dim(model.dim(), ens.dim)?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter("dt must be positive".into()));
    }
    Ok(())
}

fn first_blow_up(ens: &Ensemble) -> Option<usize> {
    ens.positions.chunks_exact(ens.dim).position(|x| x.iter().any(|v| !v.is_finite()))
}

/// Per-step constants shared by every chunk of particles.
struct StepKernel<'a> {
    model: &'a ModelSpec,
    domain: &'a Domain,
    summary: &'a MeasureSummary<'a>,
    rng: NoiseSource,
    step_index: u64,
    dt: f64,
    sqrt_dt: f64,
    d: usize,
    m: usize,
    full_space: bool,
}

impl StepKernel<'_> {
    /// Advances chunk `c`; `D > 0` fixes the dimension at compile time.
    #[inline(never)]
    fn advance<const D: usize>(&self, c: usize, xs: &mut [f64], lts: &mut [f64]) {
        let d = if D > 0 { D } else { self.d };
        let m = self.m;
        let mut drift = vec![0.0; d];
        let mut delta = vec![0.0; d];
        let mut noise = vec![0.0; lts.len() * m];
        self.rng.normal_run(Stream::Primary, self.step_index, (c * CHUNK * m) as u64, &mut noise);
        for (k, (x, lt)) in xs.chunks_exact_mut(d).zip(lts.iter_mut()).enumerate() {
            let xi = &noise[k * m..(k + 1) * m];
            self.model.drift_into(x, self.summary, &mut drift);
            for j in 0..d {
                delta[j] = drift[j] * self.dt;
            }
            self.model.diffusion().apply(x, xi, self.sqrt_dt, &mut delta);
            for j in 0..d {
                x[j] += delta[j];
            }
            if !self.full_space && x.iter().all(|v| v.is_finite()) {
                *lt += self.domain.project_in_place(x);
            }
        }
    }
}

/// One explicit Euler–Maruyama step with the pre-step empirical measure,
/// followed by projection onto the domain.
pub fn step(ens: &mut Ensemble, model: &ModelSpec, domain: &Domain, dt: f64) -> Result<()> {
    check_model(ens, model, domain, dt)?;
    let d = ens.dim;
    let snapshot = if needs_snapshot(model) { ens.positions.clone() } else { Vec::new() };
    let prepared = prepare(model, ens, &snapshot);
    let summary = prepared.get();
    let kernel = StepKernel {
        model,
        domain,
        summary,
        rng: NoiseSource::new(ens.seed),
        step_index: ens.step_index,
        dt,
        sqrt_dt: dt.sqrt(),
        d,
        m: model.diffusion().noise_dim(d),
        full_space: domain.is_full_space(),
    };
    let run = |c: usize, xs: &mut [f64], lts: &mut [f64]| match d {
        1 => kernel.advance::<1>(c, xs, lts),
        2 => kernel.advance::<2>(c, xs, lts),
        3 => kernel.advance::<3>(c, xs, lts),
        _ => kernel.advance::<0>(c, xs, lts),
    };
    if rayon::current_num_threads() == 1 {
        for (c, (xs, lts)) in ens.positions.chunks_mut(d * CHUNK).zip(ens.local_time.chunks_mut(CHUNK)).enumerate() {
            run(c, xs, lts);
        }
    } else {
        ens.positions
            .par_chunks_mut(d * CHUNK)
            .zip(ens.local_time.par_chunks_mut(CHUNK))
            .enumerate()
            .for_each(|(c, (xs, lts))| run(c, xs, lts));
    }

    if let Some(i) = first_blow_up(ens) {
        return Err(Error::BlowUp { particle: i, time: ens.time + dt });
    }
    ens.time += dt;
    ens.step_index += 1;
    Ok(())
}

/// Scalar statistic of an ensemble.
pub type StatisticFn = Arc<dyn Fn(&Ensemble) -> Result<f64> + Send + Sync>;

/// Built-in per-observation statistics.
#[derive(Clone)]
pub enum Observer {
    /// Columns `mean_0 .. mean_{d-1}`.
    Mean,
    /// Column `second_moment`: average `|x|²`.
    SecondMoment,
    /// Column `local_time`: average accumulated projection distance.
    LocalTime,
    /// Stores a copy of every particle position.
    Snapshot,
    /// Named scalar statistic of the ensemble, e.g. a distance to a reference law.
    Custom { name: String, f: StatisticFn },
}

impl std::fmt::Debug for Observer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Observer::Mean => write!(f, "Mean"),
            Observer::SecondMoment => write!(f, "SecondMoment"),
            Observer::LocalTime => write!(f, "LocalTime"),
            Observer::Snapshot => write!(f, "Snapshot"),
            Observer::Custom { name, .. } => write!(f, "Custom({name})"),
        }
    }
}

impl Observer {
    pub fn custom(name: impl Into<String>, f: impl Fn(&Ensemble) -> Result<f64> + Send + Sync + 'static) -> Self {
        Observer::Custom { name: name.into(), f: Arc::new(f) }
    }
}

/// Observation times with named statistic columns and optional snapshots.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub columns: Vec<(String, Vec<f64>)>,
    pub snapshots: Vec<Ensemble>,
}

impl Trajectory {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    fn push(&mut self, name: &str, value: f64) {
        match self.columns.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => v.push(value),
            None => self.columns.push((name.to_string(), vec![value])),
        }
    }

    fn observe(&mut self, ens: &Ensemble, observers: &[Observer]) -> Result<()> {
        self.times.push(ens.time);
        for obs in observers {
            match obs {
                Observer::Mean => {
                    for (k, m) in ens.mean().into_iter().enumerate() {
                        self.push(&format!("mean_{k}"), m);
                    }
                }
                Observer::SecondMoment => self.push("second_moment", ens.second_moment()),
                Observer::LocalTime => self.push("local_time", ens.mean_local_time()),
                Observer::Snapshot => self.snapshots.push(ens.clone()),
                Observer::Custom { name, f } => {
                    let v = f(ens)?;
                    self.push(name, v);
                }
            }
        }
        Ok(())
    }

    /// `time,statistic,value` rows.
    pub fn write_summary_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,statistic,value")?;
        for (k, t) in self.times.iter().enumerate() {
            for (name, values) in &self.columns {
                writeln!(w, "{},{},{}", csv_float(*t), name, csv_float(values[k]))?;
            }
        }
        Ok(())
    }

    pub fn write_snapshots_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (k, s) in self.snapshots.iter().enumerate() {
            s.write_csv(&mut w, k == 0)?;
        }
        Ok(())
    }
}

/// Number of steps of size `dt` covering `[0, t_end]`; `dt` must divide `t_end`.
pub fn step_count(dt: f64, t_end: f64) -> Result<u64> {
    if !(t_end >= 0.0) || !(dt > 0.0) {
        return Err(Error::InvalidParameter("need T ≥ 0 and dt > 0".into()));
    }
    let steps = (t_end / dt).round();
    if (steps * dt - t_end).abs() > 1e-9 * t_end.max(dt) {
        return Err(Error::InvalidParameter(format!("dt = {dt} does not divide T = {t_end}")));
    }
    Ok(steps as u64)
}

/// Runs `T/dt` steps, observing at time 0 and every `observe_every` steps
/// (and at the final time).
pub fn simulate(
    ens0: &Ensemble,
    model: &ModelSpec,
    domain: &Domain,
    dt: f64,
    t_end: f64,
    observe_every: usize,
    observers: &[Observer],
) -> Result<(Ensemble, Trajectory)> {
    let steps = step_count(dt, t_end)?;
    let every = observe_every.max(1) as u64;
    let mut ens = ens0.clone();
    let mut traj = Trajectory::default();
    traj.observe(&ens, observers)?;
    for k in 1..=steps {
        step(&mut ens, model, domain, dt)?;
        if k % every == 0 || k == steps {
            traj.observe(&ens, observers)?;
        }
    }
    Ok((ens, traj))
}

/// True when a kernel model would run the O(N²) interaction above the advisory size.
pub fn kernel_cost_warning(model: &ModelSpec, n: usize) -> Option<String> {
    (matches!(model.interaction(), Interaction::Kernel { .. }) && n > KERNEL_WARN_N)
        .then(|| format!("general interaction kernel with N = {n} > {KERNEL_WARN_N}: O(N²) per step"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[cfg_attr(feature = "schema", derive(schemars::JsonSchema))]
#[serde(rename_all = "snake_case")]
pub enum CouplingMode {
    Synchronous,
    #[default]
    Reflection,
}

pub const DEFAULT_MEET_TOLERANCE: f64 = 0.5;

/// Two ensembles driven by coupled noise, pair `i` being `(X_i, Y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledEnsemble {
    pub x: Ensemble,
    pub y: Ensemble,
    pub mode: CouplingMode,
    pub coupled: Vec<bool>,
    pub meet_tolerance: f64,
}

impl CoupledEnsemble {
    pub fn new(x: Ensemble, y: Ensemble, mode: CouplingMode, meet_tolerance: f64) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::InvalidParameter("coupled ensembles need equal particle counts".into()));
        }
        check_dim(x.dim, y.dim)?;
        if !(meet_tolerance >= 0.0) {
            return Err(Error::InvalidParameter("meet tolerance must be nonnegative".into()));
        }
        let coupled = (0..x.len()).map(|i| x.particle(i) == y.particle(i)).collect();
        Ok(Self { x, y, mode, coupled, meet_tolerance })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Advances both sides one step. Synchronous: identical increments. Reflection:
/// the Y side's isotropic increment is mirrored by `I − 2uu*`, `u = (x−y)/|x−y|`,
/// while the `σ̂` part is shared. A pair closer than `meet_tolerance·√dt`
/// after the step, or (reflection) whose gap changed sign along the mirror
/// direction, is declared coupled and `Y_i` is set to `X_i`.
pub fn coupled_step(pair: &mut CoupledEnsemble, model: &ModelSpec, domain: &Domain, dt: f64) -> Result<()> {
    check_model(&pair.x, model, domain, dt)?;
    if pair.mode == CouplingMode::Reflection && model.diffusion().isotropic_alpha().is_none() {
        return Err(Error::InvalidModel("reflection coupling needs the split σσ* = αI + σ̂σ̂*".into()));
    }
    if pair.x.seed != pair.y.seed || pair.x.step_index != pair.y.step_index {
        return Err(Error::InvalidParameter("coupled sides must share seed and step counter".into()));
    }
    let d = pair.x.dim;
    let m = model.diffusion().noise_dim(d);
    let sx = if needs_snapshot(model) { pair.x.positions.clone() } else { Vec::new() };
    let sy = if needs_snapshot(model) { pair.y.positions.clone() } else { Vec::new() };
    let px = prepare(model, &pair.x, &sx);
    let py = prepare(model, &pair.y, &sy);
    let (sum_x, sum_y) = (px.get(), py.get());
    let rng = NoiseSource::new(pair.x.seed);
    let step_index = pair.x.step_index;
    let sqrt_dt = dt.sqrt();
    let threshold = pair.meet_tolerance * sqrt_dt;
    let reflect = pair.mode == CouplingMode::Reflection;
    let full_space = domain.is_full_space();

    pair.x
        .positions
        .par_chunks_mut(d * CHUNK)
        .zip(pair.y.positions.par_chunks_mut(d * CHUNK))
        .zip(pair.x.local_time.par_chunks_mut(CHUNK))
        .zip(pair.y.local_time.par_chunks_mut(CHUNK))
        .zip(pair.coupled.par_chunks_mut(CHUNK))
        .enumerate()
        .for_each(|(c, ((((xs, ys), lxs), lys), flags))| {
            let mut drift = vec![0.0; d];
            let mut xi_y = vec![0.0; m];
            let mut delta = vec![0.0; d];
            let mut u = vec![0.0; d];
            let mut noise = vec![0.0; flags.len() * m];
            rng.normal_run(Stream::Primary, step_index, (c * CHUNK * m) as u64, &mut noise);
            for k in 0..flags.len() {
                let xi = &noise[k * m..(k + 1) * m];
                let x = &mut xs[k * d..(k + 1) * d];
                let y = &mut ys[k * d..(k + 1) * d];

                // Y-side noise from the pre-step gap
                xi_y.copy_from_slice(xi);
                let mut mirrored = false;
                if reflect && !flags[k] {
                    let mut r2 = 0.0;
                    for j in 0..d {
                        u[j] = x[j] - y[j];
                        r2 += u[j] * u[j];
                    }
                    let r = r2.sqrt();
                    if r > 0.0 {
                        let proj: f64 = (0..d).map(|j| u[j] / r * xi[j]).sum();
                        for j in 0..d {
                            xi_y[j] = xi[j] - 2.0 * proj * u[j] / r;
                        }
                        mirrored = true;
                    }
                }

                model.drift_into(x, sum_x, &mut drift);
                for j in 0..d {
                    delta[j] = drift[j] * dt;
                }
                model.diffusion().apply(x, xi, sqrt_dt, &mut delta);
                for j in 0..d {
                    x[j] += delta[j];
                }
                if !full_space && x.iter().all(|v| v.is_finite()) {
                    lxs[k] += domain.project_in_place(x);
                }

                if flags[k] {
                    y.copy_from_slice(x);
                    lys[k] = lxs[k];
                    continue;
                }
                model.drift_into(y, sum_y, &mut drift);
                for j in 0..d {
                    delta[j] = drift[j] * dt;
                }
                model.diffusion().apply(y, &xi_y, sqrt_dt, &mut delta);
                for j in 0..d {
                    y[j] += delta[j];
                }
                if !full_space && y.iter().all(|v| v.is_finite()) {
                    lys[k] += domain.project_in_place(y);
                }
                // the gap along u is the mirrored 1D diffusion; a sign change means it hit zero
                let crossed = mirrored && (0..d).map(|j| (x[j] - y[j]) * u[j]).sum::<f64>() <= 0.0;
                if crossed || dist_sq(x, y).sqrt() <= threshold {
                    flags[k] = true;
                    y.copy_from_slice(x);
                }
            }
        });

    for side in [&pair.x, &pair.y] {
        if let Some(i) = first_blow_up(side) {
            return Err(Error::BlowUp { particle: i, time: side.time + dt });
        }
    }
    for side in [&mut pair.x, &mut pair.y] {
        side.time += dt;
        side.step_index += 1;
    }
    Ok(())
}

/// Coupling diagnostics at one time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingSnapshot {
    pub time: f64,
    pub fraction_coupled: f64,
    pub mean_distance: f64,
    /// Average `ψ(|X_i − Y_i|)`: an upper estimate of `W_ψ` between the two laws.
    pub psi_distance: f64,
}

pub fn coupling_statistics(pair: &CoupledEnsemble, psi: &PsiProfile) -> CouplingSnapshot {
    let n = pair.len();
    let dist = |i: usize| dist_sq(pair.x.particle(i), pair.y.particle(i)).sqrt();
    CouplingSnapshot {
        time: pair.x.time,
        fraction_coupled: pair.coupled.iter().filter(|c| **c).count() as f64 / n as f64,
        mean_distance: pairwise_sum_by(n, &dist) / n as f64,
        psi_distance: pairwise_sum_by(n, &|i| psi.psi(dist(i))) / n as f64,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CouplingTrajectory {
    pub snapshots: Vec<CouplingSnapshot>,
}

impl CouplingTrajectory {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|s| s.time).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "time,statistic,value")?;
        for s in &self.snapshots {
            let t = csv_float(s.time);
            writeln!(w, "{t},fraction_coupled,{}", csv_float(s.fraction_coupled))?;
            writeln!(w, "{t},mean_distance,{}", csv_float(s.mean_distance))?;
            writeln!(w, "{t},psi_distance,{}", csv_float(s.psi_distance))?;
        }
        Ok(())
    }
}

/// Runs a coupled simulation, recording coupling statistics at time 0, every
/// `observe_every` steps, and at the end.
pub fn simulate_coupled(
    pair0: &CoupledEnsemble,
    model: &ModelSpec,
    domain: &Domain,
    dt: f64,
    t_end: f64,
    observe_every: usize,
    psi: &PsiProfile,
) -> Result<(CoupledEnsemble, CouplingTrajectory)> {
    let steps = step_count(dt, t_end)?;
    let every = observe_every.max(1) as u64;
    let mut pair = pair0.clone();
    let mut traj = CouplingTrajectory::default();
    traj.snapshots.push(coupling_statistics(&pair, psi));
    for k in 1..=steps {
        coupled_step(&mut pair, model, domain, dt)?;
        if k % every == 0 || k == steps {
            traj.snapshots.push(coupling_statistics(&pair, psi));
        }
    }
    Ok((pair, traj))
}

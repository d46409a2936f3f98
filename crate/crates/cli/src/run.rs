//! The experiment pipeline: simulate, couple, pde, fixed point; CSV outputs and manifest.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use mvsde_core::metrics::{bin_on_edges, EmpiricalMeasure};
use mvsde_core::model::ModelSpec;
use mvsde_core::particle::{
    csv_float, init_ensemble, init_ensemble_for, simulate, simulate_coupled, CoupledEnsemble, Ensemble, Observer, Side,
};
use mvsde_core::pde::{l1_against_particles, solve, DensityGrid, GranularMedia};
use mvsde_core::rates::{fit_rate_with, fixed_point_invariant, FitOptions, FixedPointParams, RateCertificate};
use mvsde_core::Error;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, PdeInitial};
use crate::distance::distance;
use crate::error::{CliError, Result, Stage};

pub const MANIFEST: &str = "manifest.json";

/// Which parts of the pipeline to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub simulate: bool,
    pub couple: bool,
    pub pde: bool,
    pub fixed_point: bool,
}

impl Stages {
    /// Every stage the config declares; particle simulation always runs.
    pub fn configured(cfg: &ExperimentConfig) -> Self {
        Self {
            simulate: true,
            couple: cfg.coupling.is_some(),
            pde: cfg.pde.is_some(),
            fixed_point: cfg.fixed_point.is_some(),
        }
    }

    pub fn only_simulate() -> Self {
        Self { simulate: true, couple: false, pde: false, fixed_point: false }
    }
}

/// Seeds of the independent random inputs, all derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    /// Initial laws and Brownian increments (separate streams of one key).
    pub particles: u64,
    pub reference: u64,
    /// Second reference sample for the same-law noise floor.
    pub noise_floor: u64,
    pub fixed_point: u64,
}

impl Seeds {
    pub fn derive(master: u64) -> Self {
        Self {
            particles: master,
            reference: master.wrapping_add(1),
            noise_floor: master.wrapping_add(2),
            fixed_point: master.wrapping_add(3),
        }
    }
}

/// One line of `rate.csv`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateRow {
    pub metric: String,
    pub noise_floor: f64,
    /// Level at which the fit window ends: `floor_multiple × noise_floor`.
    pub truncation: f64,
    pub certificate: Option<RateCertificate>,
}

#[derive(Debug, Clone, Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    config_sha256: String,
    seeds: Seeds,
    files: BTreeMap<String, String>,
    config: &'a ExperimentConfig,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: PathBuf,
    pub files: Vec<String>,
    pub rates: Vec<RateRow>,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(name);
        let f = File::create(&path).map_err(|e| CliError::io(&path, e))?;
        self.files.push(name.to_string());
        Ok(BufWriter::new(f))
    }

    fn write(&mut self, name: &str, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let mut w = self.create(name)?;
        body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(&path, e))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serialises"))
}

/// Runs the selected stages and writes their CSVs plus `manifest.json` into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path, stages: Stages) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let model = cfg.build_model()?;
    let seeds = Seeds::derive(cfg.seed);
    let mut outputs = Outputs { dir: out.to_path_buf(), files: Vec::new() };
    let mut rates = Vec::new();

    let initial = init_ensemble(cfg.integrator.n, &cfg.initial, &cfg.domain, seeds.particles).stage("initial law")?;
    let pde_grids = if stages.pde { Some(pde_stage(cfg, &model, &initial, &mut outputs)?) } else { None };
    if stages.simulate {
        rates.extend(simulate_stage(cfg, &model, &seeds, &initial, pde_grids.as_deref(), &mut outputs)?);
    }
    if stages.couple {
        rates.push(couple_stage(cfg, &model, &seeds, &mut outputs)?);
    }
    if stages.simulate || stages.couple {
        write_rates(&rates, &mut outputs)?;
    }
    let fixed_point =
        if stages.fixed_point { Some(fixed_point_stage(cfg, &model, &seeds, &initial, &mut outputs)?) } else { None };

    let manifest = write_manifest(cfg, &seeds, &outputs)?;
    if let Some(Err(e)) = fixed_point {
        return Err(e);
    }
    Ok(RunSummary { manifest, files: outputs.files, rates })
}

fn write_manifest(cfg: &ExperimentConfig, seeds: &Seeds, outputs: &Outputs) -> Result<PathBuf> {
    let mut files = BTreeMap::new();
    for name in &outputs.files {
        let path = outputs.dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
        files.insert(name.clone(), sha256_hex(&bytes));
    }
    let manifest = Manifest {
        tool: "mvsde",
        version: env!("CARGO_PKG_VERSION"),
        config_sha256: config_hash(cfg),
        seeds: *seeds,
        files,
        config: cfg,
    };
    let path = outputs.dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
    std::fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

/// `time,statistic,value` rows, one per (time, column).
fn write_long<W: Write>(w: &mut W, times: &[f64], columns: &[(String, Vec<f64>)]) -> std::io::Result<()> {
    writeln!(w, "time,statistic,value")?;
    for (k, t) in times.iter().enumerate() {
        for (name, values) in columns {
            writeln!(w, "{},{},{}", csv_float(*t), name, csv_float(values[k]))?;
        }
    }
    Ok(())
}

fn reference_sample(cfg: &ExperimentConfig, seed: u64, n: usize) -> Result<Option<EmpiricalMeasure>> {
    cfg.reference
        .as_ref()
        .map(|r| init_ensemble(n, &r.law, &cfg.domain, seed).map(|e| e.empirical()))
        .transpose()
        .stage("reference law")
}

fn simulate_stage(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    seeds: &Seeds,
    initial: &Ensemble,
    pde_grids: Option<&[DensityGrid]>,
    outputs: &mut Outputs,
) -> Result<Vec<RateRow>> {
    let it = &cfg.integrator;
    let reference = reference_sample(cfg, seeds.reference, cfg.reference.as_ref().map_or(0, |r| r.n))?.map(Arc::new);
    let mut observers = vec![Observer::Mean, Observer::SecondMoment, Observer::LocalTime];
    let mut distance_names = Vec::new();
    if let Some(reference) = &reference {
        for m in &cfg.metrics {
            let (m, reference) = (m.clone(), reference.clone());
            distance_names.push(m.label());
            observers.push(Observer::custom(m.label(), move |e: &Ensemble| distance(&m, &e.empirical(), &reference)));
        }
    }
    if let Some(grids) = pde_grids {
        let grids = grids.to_vec();
        distance_names.push("pde_l1".into());
        observers.push(Observer::custom("pde_l1", move |e: &Ensemble| {
            let g = grids
                .iter()
                .min_by(|a, b| (a.time - e.time).abs().total_cmp(&(b.time - e.time).abs()))
                .expect("at least the initial grid");
            Ok(l1_against_particles(g, e)?.l1)
        }));
    }
    let (end, traj) =
        simulate(initial, model, &cfg.domain, it.dt, it.t_end, it.observe_every, &observers).stage("simulate")?;

    let (dist_cols, stat_cols): (Vec<_>, Vec<_>) =
        traj.columns.iter().cloned().partition(|(name, _)| distance_names.contains(name));
    outputs.write("trajectory.csv", |w| write_long(w, &traj.times, &stat_cols))?;
    outputs.write("distances.csv", |w| write_long(w, &traj.times, &dist_cols))?;
    outputs.write("ensemble.csv", |w| end.write_csv(w, true))?;

    let mut rows = Vec::new();
    if let Some(reference) = &reference {
        let second = reference_sample(cfg, seeds.noise_floor, it.n)?.expect("reference configured");
        for m in &cfg.metrics {
            let floor = match cfg.fit.noise_floor {
                Some(f) => f,
                None => distance(m, &second, reference).stage("noise floor")?,
            };
            let values = traj.column(&m.label()).expect("observed metric");
            rows.push(fit_row(cfg, m.label(), &traj.times, values, floor)?);
        }
    }
    Ok(rows)
}

fn fit_row(cfg: &ExperimentConfig, metric: String, times: &[f64], values: &[f64], floor: f64) -> Result<RateRow> {
    let opts = FitOptions {
        burn_in_fraction: cfg.fit.burn_in_fraction,
        min_r_squared: cfg.fit.min_r_squared,
        ..FitOptions::default()
    };
    let truncation = cfg.fit.floor_multiple * floor;
    let certificate = match fit_rate_with(times, values, truncation, opts) {
        Ok(c) => Some(c),
        Err(Error::TooFewPoints { .. }) => None,
        Err(e) => return Err(CliError::Runtime { stage: "rate fit", source: e }),
    };
    Ok(RateRow { metric, noise_floor: floor, truncation, certificate })
}

fn write_rates(rows: &[RateRow], outputs: &mut Outputs) -> Result<()> {
    outputs.write("rate.csv", |w| {
        writeln!(w, "metric,c,lambda,r_squared,window_start,window_end,noise_floor,truncation,points_used,reliable")?;
        for r in rows {
            match &r.certificate {
                Some(c) => {
                    let (a, b) = c.window.unwrap_or((f64::NAN, f64::NAN));
                    writeln!(
                        w,
                        "{},{},{},{},{},{},{},{},{},{}",
                        r.metric,
                        csv_float(c.c),
                        csv_float(c.lambda),
                        csv_float(c.r_squared.unwrap_or(f64::NAN)),
                        csv_float(a),
                        csv_float(b),
                        csv_float(r.noise_floor),
                        csv_float(r.truncation),
                        c.points_used,
                        c.reliable
                    )?;
                }
                None => {
                    let nan = csv_float(f64::NAN);
                    writeln!(
                        w,
                        "{},{nan},{nan},{nan},{nan},{nan},{},{},0,false",
                        r.metric,
                        csv_float(r.noise_floor),
                        csv_float(r.truncation)
                    )?;
                }
            }
        }
        Ok(())
    })
}

fn couple_stage(cfg: &ExperimentConfig, model: &ModelSpec, seeds: &Seeds, outputs: &mut Outputs) -> Result<RateRow> {
    let c = cfg.coupling.as_ref().ok_or_else(|| CliError::Invalid("the config has no coupling section".into()))?;
    let it = &cfg.integrator;
    let y_law = cfg.initial_y.as_ref().expect("validated");
    let x = init_ensemble_for(it.n, &cfg.initial, &cfg.domain, seeds.particles, Side::X).stage("initial law")?;
    let y = init_ensemble_for(it.n, y_law, &cfg.domain, seeds.particles, Side::Y).stage("initial law")?;
    let pair = CoupledEnsemble::new(x, y, c.mode, c.meet_tolerance).stage("coupling")?;
    let psi = c.psi.profile();
    let (_, traj) =
        simulate_coupled(&pair, model, &cfg.domain, it.dt, it.t_end, it.observe_every, &psi).stage("coupling")?;
    outputs.write("coupling.csv", |w| traj.write_csv(w))?;
    let values: Vec<f64> = traj.snapshots.iter().map(|s| s.psi_distance).collect();
    fit_row(cfg, "coupling_psi".into(), &traj.times(), &values, cfg.fit.noise_floor.unwrap_or(0.0))
}

fn pde_initial(cfg: &ExperimentConfig, initial: &Ensemble) -> Result<DensityGrid> {
    let p = cfg.pde.as_ref().expect("pde configured");
    let grid = match p.initial {
        PdeInitial::Uniform => DensityGrid::uniform(p.lower, p.upper, p.cells),
        PdeInitial::Gaussian { mean, sd } => {
            DensityGrid::from_fn(p.lower, p.upper, p.cells, |x| (-0.5 * ((x - mean) / sd).powi(2)).exp())
        }
        PdeInitial::Particles => {
            let (cells, _) = bin_on_edges(&initial.empirical(), p.lower, p.upper, p.cells);
            DensityGrid::from_cells(p.lower, p.upper, cells)
        }
    };
    grid.stage("pde initial density")
}

fn pde_stage(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    initial: &Ensemble,
    outputs: &mut Outputs,
) -> Result<Vec<DensityGrid>> {
    let p = cfg.pde.as_ref().expect("pde configured");
    let eq = GranularMedia::from_model(model).stage("pde")?.with_scheme(p.scheme);
    let grid0 = pde_initial(cfg, initial)?;
    let it = &cfg.integrator;
    let every = it.observe_every as f64 * it.dt;
    let grids = solve(&grid0, &eq, it.t_end, every).stage("pde")?;
    outputs.write("pde.csv", |w| {
        for (k, g) in grids.iter().enumerate() {
            g.write_csv(w, k == 0)?;
        }
        Ok(())
    })?;
    Ok(grids)
}

/// Writes the iteration history; a non-convergent run still leaves its files.
fn fixed_point_stage(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    seeds: &Seeds,
    initial: &Ensemble,
    outputs: &mut Outputs,
) -> Result<Result<()>> {
    let f =
        cfg.fixed_point.as_ref().ok_or_else(|| CliError::Invalid("the config has no fixed_point section".into()))?;
    let params = FixedPointParams {
        dt: f.dt.unwrap_or(cfg.integrator.dt),
        t_stat: f.t_stat,
        seed: seeds.fixed_point,
        tol: f.tol,
        max_iters: f.max_iters,
    };
    let res = fixed_point_invariant(model, &cfg.domain, initial, params).stage("fixed point")?;
    outputs.write("fixed_point.csv", |w| {
        writeln!(w, "iteration,w1_gap")?;
        for (k, g) in res.history.iter().enumerate() {
            writeln!(w, "{},{}", k + 1, csv_float(*g))?;
        }
        Ok(())
    })?;
    let measure = Ensemble::from_positions(res.measure.dim(), res.measure.points().to_vec(), seeds.fixed_point)
        .stage("fixed point")?;
    outputs.write("fixed_point_measure.csv", |w| measure.write_csv(w, true))?;
    Ok(res.into_result().map(|_| ()).stage("fixed point"))
}

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvsde_core::metrics::{BinRule, EmpiricalMeasure};
use mvsde_core::model::{
    check_b1, check_lyapunov, check_psi_class, line_grid, radius_grid, BuiltinModel, ConditionReport, LyapunovSpec,
    PsiProfile,
};
use mvsde_core::particle::csv_float;
use mvsde_core::rates::{
    build_h_transform, corollary44_k, ex0_bound, fit_rate_with, harris_rate, kappa1, lemma33_constants, lemma33_kq,
    FitOptions,
};

use crate::compare::{compare_runs, Tolerances};
use crate::config::{config_schema, load_config, MetricSpec, PsiName};
use crate::distance::distance;
use crate::error::{CliError, Result, Stage};
use crate::run::{run_experiment, Stages};

#[derive(Debug, Parser)]
#[command(name = "mvsde", version, about = "Reflecting McKean-Vlasov particle experiments")]
pub struct Cli {
    /// Worker threads; outputs do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run every stage the config declares.
    Run(RunArgs),
    /// Particle simulation, distances to the reference law, rate fits.
    Simulate(RunArgs),
    /// Coupled simulation of two initial laws.
    Couple(RunArgs),
    /// Density solver on the config's pde grid.
    Pde(RunArgs),
    /// Invariant measure by the frozen-measure iteration.
    FixedPoint(RunArgs),
    /// Distance between two ensemble CSVs.
    Metrics(MetricsArgs),
    /// Rate and constant calculators.
    #[command(subcommand)]
    Rates(RatesCommand),
    /// Compare two runs by their manifests.
    Compare(CompareArgs),
    /// Condition checkers.
    #[command(subcommand)]
    Check(CheckCommand),
    /// Print the JSON Schema of the configuration file.
    Schema,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    pub config: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricName {
    W1,
    W2,
    Tv,
    WPsiLinear,
    WPsiSaturating,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[arg(long, value_enum, default_value = "w2")]
    pub metric: MetricName,
    /// Histogram cells for tv (Freedman-Diaconis when omitted).
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum RatesCommand {
    Harris {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        t0: f64,
        #[arg(long)]
        t1: f64,
    },
    Kappa1 {
        #[arg(long)]
        c: f64,
        #[arg(long)]
        lambda: f64,
    },
    Lemma33 {
        #[arg(long)]
        c: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        k: f64,
    },
    G2 {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        theta0: f64,
        #[arg(long)]
        theta1: f64,
        #[arg(long)]
        theta2: f64,
        #[arg(long)]
        beta: f64,
        #[arg(long)]
        zeta: f64,
    },
    Ex0 {
        #[arg(long, value_enum, default_value = "square")]
        phi: PhiChoice,
        #[arg(long, default_value_t = 100.0)]
        r_max: f64,
        #[arg(long)]
        v: f64,
        #[arg(long)]
        k: f64,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        t: f64,
    },
    /// Fits `c e^{−λt}` to a `time,value` CSV.
    Fit {
        input: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise_floor: f64,
        #[arg(long, default_value_t = 0.1)]
        burn_in: f64,
    },
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    /// Absolute band applied to every row.
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, default_value_t = 3.0)]
    pub floor_multiple: f64,
    #[arg(long, default_value_t = 0.25)]
    pub rate_relative: f64,
}

/// `Φ` families for the checkers and the H-transform.
#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PhiChoice {
    /// `r`
    Identity,
    /// `1 + r`
    OnePlus,
    /// `(1 + r)²`
    Square,
}

impl PhiChoice {
    fn eval(self, r: f64) -> f64 {
        match self {
            PhiChoice::Identity => r,
            PhiChoice::OnePlus => 1.0 + r,
            PhiChoice::Square => (1.0 + r) * (1.0 + r),
        }
    }
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Built-in model as JSON, e.g. '{"name":"ou"}'.
    #[arg(long, default_value = r#"{"name":"ou"}"#)]
    pub model: String,
    #[arg(long, default_value_t = -20.0, allow_hyphen_values = true)]
    pub lo: f64,
    #[arg(long, default_value_t = 20.0, allow_hyphen_values = true)]
    pub hi: f64,
    #[arg(long, default_value_t = 4001)]
    pub points: usize,
}

#[derive(Debug, Subcommand)]
pub enum CheckCommand {
    /// `⟨b¹(x), x⟩ ≤ c₁ − c₂ φ(|x|²)` and `|b¹(x)| ≤ c₁ φ(|x|²)` on a 1D grid.
    B1 {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, value_enum, default_value = "one-plus")]
        phi: PhiChoice,
        #[arg(long)]
        c1: f64,
        #[arg(long)]
        c2: f64,
    },
    /// Drift condition for `V = 1 + |x|²` on a 1D grid.
    Lyapunov {
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, value_enum, default_value = "identity")]
        phi: PhiChoice,
        #[arg(long)]
        k: f64,
        #[arg(long, default_value_t = mvsde_core::model::DEFAULT_LYAPUNOV_EPS)]
        eps: f64,
    },
    /// Admissibility of a distance profile ψ.
    Psi {
        #[arg(long, value_enum)]
        psi: PsiChoice,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PsiChoice {
    Linear,
    Saturating,
    Quadratic,
}

fn parse_model(text: &str) -> Result<BuiltinModel> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Schema { path: format!("--model {}", e.path()), message: e.inner().to_string() })
}

/// Reads `time,particle_index,x0,…` rows (or bare coordinate rows).
fn read_ensemble(path: &Path) -> Result<EmpiricalMeasure> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines().peekable();
    let skip = match lines.peek() {
        Some(h) if h.starts_with("time,particle_index") => {
            lines.next();
            2
        }
        Some(h) if h.chars().next().is_some_and(|c| c.is_alphabetic()) => {
            lines.next();
            0
        }
        _ => 0,
    };
    let mut dim = None;
    let mut points = Vec::new();
    for (k, line) in lines.filter(|l| !l.trim().is_empty()).enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .skip(skip)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| CliError::Invalid(format!("{} row {}: {e}", path.display(), k + 1)))?;
        if *dim.get_or_insert(row.len()) != row.len() {
            return Err(CliError::Invalid(format!("{} row {}: ragged row", path.display(), k + 1)));
        }
        points.extend(row);
    }
    let dim = dim.ok_or_else(|| CliError::Invalid(format!("{}: no rows", path.display())))?;
    EmpiricalMeasure::uniform(dim, points).map_err(|e| CliError::Invalid(e.to_string()))
}

fn report_line(r: &ConditionReport) -> String {
    format!(
        "condition,pass,checked,min_slack,violations\n{},{},{},{},{}\n",
        r.condition,
        r.pass,
        r.checked,
        csv_float(r.min_slack),
        r.violations.len()
    )
}

fn passed(r: &ConditionReport) -> Result<()> {
    if r.pass {
        Ok(())
    } else {
        Err(CliError::Threshold(format!("{} fails at {} grid points", r.condition, r.violations.len())))
    }
}

/// Executes one command, returning what it prints on stdout.
pub fn execute(cmd: Command) -> Result<String> {
    match cmd {
        Command::Run(a) => run(&a, None),
        Command::Simulate(a) => run(&a, Some(Stages::only_simulate())),
        Command::Couple(a) => run(&a, Some(Stages { simulate: false, couple: true, pde: false, fixed_point: false })),
        Command::Pde(a) => run(&a, Some(Stages { simulate: false, couple: false, pde: true, fixed_point: false })),
        Command::FixedPoint(a) => {
            run(&a, Some(Stages { simulate: false, couple: false, pde: false, fixed_point: true }))
        }
        Command::Metrics(m) => {
            let (a, b) = (read_ensemble(&m.a)?, read_ensemble(&m.b)?);
            let spec = match m.metric {
                MetricName::W1 => MetricSpec::W1,
                MetricName::W2 => MetricSpec::W2,
                MetricName::Tv => {
                    MetricSpec::Tv { bins: m.bins.map_or(BinRule::FreedmanDiaconis, |bins| BinRule::Count { bins }) }
                }
                MetricName::WPsiLinear => MetricSpec::WPsi { psi: PsiName::Linear },
                MetricName::WPsiSaturating => MetricSpec::WPsi { psi: PsiName::Saturating },
            };
            let v = distance(&spec, &a, &b).stage("metrics")?;
            Ok(format!("metric,value\n{},{}\n", spec.label(), csv_float(v)))
        }
        Command::Rates(r) => rates(r),
        Command::Compare(c) => {
            let tol =
                Tolerances { absolute: c.tolerance, floor_multiple: c.floor_multiple, rate_relative: c.rate_relative };
            let report = compare_runs(&c.a, &c.b, tol)?;
            let csv = report.to_csv();
            if report.red() > 0 {
                print!("{csv}");
                return Err(CliError::Threshold(format!("{} differences exceed their tolerance", report.red())));
            }
            Ok(csv)
        }
        Command::Check(c) => check(c),
        Command::Schema => Ok(config_schema()),
    }
}

fn run(a: &RunArgs, stages: Option<Stages>) -> Result<String> {
    let cfg = load_config(&a.config)?;
    let stages = stages.unwrap_or_else(|| Stages::configured(&cfg));
    if stages.couple && cfg.coupling.is_none() {
        return Err(CliError::Schema { path: "/coupling".into(), message: "missing; required by couple".into() });
    }
    if stages.pde && cfg.pde.is_none() {
        return Err(CliError::Schema { path: "/pde".into(), message: "missing; required by pde".into() });
    }
    if stages.fixed_point && cfg.fixed_point.is_none() {
        return Err(CliError::Schema {
            path: "/fixed_point".into(),
            message: "missing; required by fixed-point".into(),
        });
    }
    let summary = run_experiment(&cfg, &a.out, stages)?;
    let mut s = format!("manifest,{}\n", summary.manifest.display());
    for f in &summary.files {
        s.push_str(&format!("file,{}\n", a.out.join(f).display()));
    }
    Ok(s)
}

fn rates(r: RatesCommand) -> Result<String> {
    let stage = "rates";
    Ok(match r {
        RatesCommand::Harris { alpha, beta, t0, t1 } => {
            let h = harris_rate(alpha, beta, t0, t1).stage(stage)?;
            format!("lambda,delta\n{},{}\n", csv_float(h.lambda), csv_float(h.delta))
        }
        RatesCommand::Kappa1 { c, lambda } => {
            let k = kappa1(c, lambda).stage(stage)?;
            format!("kappa1,argmax\n{},{}\n", csv_float(k.value), csv_float(k.argmax))
        }
        RatesCommand::Lemma33 { c, lambda, q, k } => {
            let l = lemma33_constants(c, lambda, q, k).stage(stage)?;
            let kq = lemma33_kq(c, lambda, q).stage(stage)?;
            format!(
                "t_hat,delta_k,lambda_prime,valid,k_q\n{},{},{},{},{}\n",
                csv_float(l.t_hat),
                csv_float(l.delta_k),
                csv_float(l.lambda_prime),
                l.valid,
                csv_float(kq)
            )
        }
        RatesCommand::G2 { alpha, theta0, theta1, theta2, beta, zeta } => {
            let g = corollary44_k(alpha, theta0, theta1, theta2, beta, zeta).stage(stage)?;
            format!(
                "integral,k,beta_threshold\n{},{},{}\n",
                csv_float(g.integral),
                csv_float(g.k),
                csv_float(g.beta_threshold)
            )
        }
        RatesCommand::Ex0 { phi, r_max, v, k, lambda, t } => {
            let ht = build_h_transform(move |r| phi.eval(r), r_max, 2001).stage(stage)?;
            let b = ex0_bound(&ht, v, k, lambda, t).stage(stage)?;
            format!("bound,h_infinity\n{},{}\n", csv_float(b), csv_float(ht.h_infinity))
        }
        RatesCommand::Fit { input, noise_floor, burn_in } => {
            let text = std::fs::read_to_string(&input).map_err(|e| CliError::io(&input, e))?;
            let (mut t, mut v) = (Vec::new(), Vec::new());
            for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let f: Vec<&str> = line.split(',').collect();
                match (f.first().map(|s| s.trim().parse::<f64>()), f.get(1).map(|s| s.trim().parse::<f64>())) {
                    (Some(Ok(a)), Some(Ok(b))) => {
                        t.push(a);
                        v.push(b);
                    }
                    _ if k == 0 => {}
                    _ => {
                        return Err(CliError::Invalid(format!(
                            "{} line {}: expected time,value",
                            input.display(),
                            k + 1
                        )))
                    }
                }
            }
            let opts = FitOptions { burn_in_fraction: burn_in, ..FitOptions::default() };
            let c = fit_rate_with(&t, &v, noise_floor, opts).stage("rate fit")?;
            let (a, b) = c.window.unwrap_or((f64::NAN, f64::NAN));
            format!(
                "c,lambda,r_squared,window_start,window_end,points_used,reliable\n{},{},{},{},{},{},{}\n",
                csv_float(c.c),
                csv_float(c.lambda),
                csv_float(c.r_squared.unwrap_or(f64::NAN)),
                csv_float(a),
                csv_float(b),
                c.points_used,
                c.reliable
            )
        }
    })
}

fn check(c: CheckCommand) -> Result<String> {
    match c {
        CheckCommand::B1 { grid, phi, c1, c2 } => {
            let model = parse_model(&grid.model)?.build(1).stage("check")?;
            let r = check_b1(&model, move |r| phi.eval(r), c1, c2, &line_grid(grid.lo, grid.hi, grid.points));
            print!("{}", report_line(&r));
            passed(&r).map(|_| String::new())
        }
        CheckCommand::Lyapunov { grid, phi, k, eps } => {
            let model = parse_model(&grid.model)?.build(1).stage("check")?;
            let lyap = LyapunovSpec::quadratic(Arc::new(move |r| phi.eval(r)), k, eps).stage("check")?;
            let r = check_lyapunov(&model, &lyap, &line_grid(grid.lo, grid.hi, grid.points));
            print!("{}", report_line(&r));
            passed(&r).map(|_| String::new())
        }
        CheckCommand::Psi { psi, kappa } => {
            let profile = match psi {
                PsiChoice::Linear => PsiProfile::linear(),
                PsiChoice::Saturating => PsiProfile::saturating(),
                PsiChoice::Quadratic => PsiProfile::quadratic(kappa),
            };
            let ok = check_psi_class(&profile, &radius_grid(1e-6, 1e2, 4000));
            print!("psi,admissible\n{},{ok}\n", profile.name);
            if ok {
                Ok(String::new())
            } else {
                Err(CliError::Threshold(format!("ψ = {} is not admissible", profile.name)))
            }
        }
    }
}

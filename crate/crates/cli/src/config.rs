//! Experiment configuration: one JSON document per run.

use std::path::Path;

use mvsde_core::metrics::BinRule;
use mvsde_core::model::{BuiltinModel, ModelSpec, PsiProfile};
use mvsde_core::particle::{step_count, CouplingMode, Sampler};
use mvsde_core::pde::FluxScheme;
use mvsde_core::Domain;
use schemars::JsonSchema;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// Master seed; every stream of the run is derived from it.
    pub seed: u64,
    pub domain: Domain,
    pub model: BuiltinModel,
    pub initial: Sampler,
    /// Initial law of the second copy in coupled runs.
    #[serde(default)]
    pub initial_y: Option<Sampler>,
    pub integrator: Integrator,
    /// Law the ensemble is compared with at every observation.
    #[serde(default)]
    pub reference: Option<Reference>,
    #[serde(default)]
    pub metrics: Vec<MetricSpec>,
    #[serde(default)]
    pub coupling: Option<CouplingConfig>,
    #[serde(default)]
    pub fit: FitConfig,
    #[serde(default)]
    pub pde: Option<PdeConfig>,
    #[serde(default)]
    pub fixed_point: Option<FixedPointConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Integrator {
    pub dt: f64,
    pub t_end: f64,
    pub n: usize,
    /// Steps between observations.
    pub observe_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct Reference {
    pub law: Sampler,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, JsonSchema)]
#[serde(rename_all = "snake_case")]
pub enum PsiName {
    Linear,
    Saturating,
}

impl PsiName {
    pub fn profile(self) -> PsiProfile {
        match self {
            PsiName::Linear => PsiProfile::linear(),
            PsiName::Saturating => PsiProfile::saturating(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MetricSpec {
    W1,
    W2,
    Wp {
        p: f64,
    },
    WPsi {
        psi: PsiName,
    },
    Tv {
        #[serde(default)]
        bins: BinRule,
    },
}

impl MetricSpec {
    /// Column label in `distances.csv` and `rate.csv`.
    pub fn label(&self) -> String {
        match self {
            MetricSpec::W1 => "w1".into(),
            MetricSpec::W2 => "w2".into(),
            MetricSpec::Wp { p } => format!("w{p}"),
            MetricSpec::WPsi { psi } => format!("w_psi_{}", serde_json::to_value(psi).unwrap().as_str().unwrap()),
            MetricSpec::Tv { .. } => "tv".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub mode: CouplingMode,
    #[serde(default = "default_meet")]
    pub meet_tolerance: f64,
    #[serde(default = "default_psi")]
    pub psi: PsiName,
}

fn default_meet() -> f64 {
    0.5
}
fn default_psi() -> PsiName {
    PsiName::Saturating
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_burn_in")]
    pub burn_in_fraction: f64,
    #[serde(default = "default_r2")]
    pub min_r_squared: f64,
    /// Overrides the measured same-law noise floor.
    #[serde(default)]
    pub noise_floor: Option<f64>,
    /// Fits stop at the first value below this multiple of the floor.
    #[serde(default = "default_floor_multiple")]
    pub floor_multiple: f64,
}

fn default_burn_in() -> f64 {
    0.1
}
fn default_r2() -> f64 {
    0.9
}
fn default_floor_multiple() -> f64 {
    3.0
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            burn_in_fraction: default_burn_in(),
            min_r_squared: default_r2(),
            noise_floor: None,
            floor_multiple: default_floor_multiple(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PdeInitial {
    /// Histogram of the initial particle ensemble.
    Particles,
    Uniform,
    Gaussian {
        mean: f64,
        sd: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct PdeConfig {
    pub lower: f64,
    pub upper: f64,
    pub cells: usize,
    #[serde(default)]
    pub scheme: FluxScheme,
    #[serde(default = "default_pde_initial")]
    pub initial: PdeInitial,
}

fn default_pde_initial() -> PdeInitial {
    PdeInitial::Particles
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(deny_unknown_fields)]
pub struct FixedPointConfig {
    pub t_stat: f64,
    pub tol: f64,
    pub max_iters: usize,
    /// Defaults to the integrator step.
    #[serde(default)]
    pub dt: Option<f64>,
}

/// Parses JSON, reporting schema errors with the path of the offending field.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| CliError::Schema { path: pointer(&e.path().to_string()), message: e.inner().to_string() })?;
    cfg.validate()?;
    Ok(cfg)
}

/// JSON Schema of the configuration document.
pub fn config_schema() -> String {
    let schema = schemars::schema_for!(ExperimentConfig);
    serde_json::to_string_pretty(&schema).expect("schema serialises") + "\n"
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text)
}

/// `a.b[0].c` as the JSON pointer `/a/b/0/c`.
fn pointer(path: &str) -> String {
    if path == "." {
        return "/".into();
    }
    let mut out = String::new();
    for part in path.split('.') {
        for piece in part.split('[') {
            let piece = piece.trim_end_matches(']');
            if !piece.is_empty() {
                out.push('/');
                out.push_str(piece);
            }
        }
    }
    out
}

fn invalid(path: &str, message: impl Into<String>) -> CliError {
    CliError::Schema { path: path.into(), message: message.into() }
}

impl ExperimentConfig {
    pub fn dim(&self) -> usize {
        self.domain.dimension()
    }

    pub fn build_model(&self) -> Result<ModelSpec> {
        self.model.build(self.dim()).map_err(|e| invalid("/model", e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.domain.validate().map_err(|e| invalid("/domain", e.to_string()))?;
        let d = self.dim();
        self.build_model()?;
        for (path, s) in [("/initial", Some(&self.initial)), ("/initial_y", self.initial_y.as_ref())] {
            if let Some(got) = s.and_then(Sampler::dim) {
                if got != d {
                    return Err(invalid(path, format!("law has dimension {got}, domain has {d}")));
                }
            }
        }
        let it = &self.integrator;
        if it.n == 0 {
            return Err(invalid("/integrator/n", "need at least one particle"));
        }
        if it.observe_every == 0 {
            return Err(invalid("/integrator/observe_every", "must be positive"));
        }
        step_count(it.dt, it.t_end).map_err(|e| invalid("/integrator/dt", e.to_string()))?;
        if let Some(r) = &self.reference {
            if r.n == 0 {
                return Err(invalid("/reference/n", "need at least one sample"));
            }
            if let Some(got) = r.law.dim() {
                if got != d {
                    return Err(invalid("/reference/law", format!("law has dimension {got}, domain has {d}")));
                }
            }
        }
        if !self.metrics.is_empty() && self.reference.is_none() {
            return Err(invalid("/reference", "metrics need a reference law"));
        }
        for (k, m) in self.metrics.iter().enumerate() {
            match m {
                MetricSpec::Wp { p } if !(*p >= 1.0) => {
                    return Err(invalid(&format!("/metrics/{k}/p"), "p must be at least 1"));
                }
                MetricSpec::WPsi { .. } => {
                    let r = self.reference.as_ref().map_or(0, |r| r.n);
                    if r != it.n || r > mvsde_core::metrics::EXACT_LIMIT {
                        return Err(invalid(
                            &format!("/metrics/{k}"),
                            format!(
                                "w_psi uses exact assignment: reference and ensemble sizes must agree and not exceed {}",
                                mvsde_core::metrics::EXACT_LIMIT
                            ),
                        ));
                    }
                }
                MetricSpec::Tv { .. } if d != 1 => {
                    return Err(invalid(&format!("/metrics/{k}"), "tv is estimated on one-dimensional histograms"));
                }
                _ => {}
            }
        }
        if let Some(c) = &self.coupling {
            if self.initial_y.is_none() {
                return Err(invalid("/initial_y", "coupled runs need a second initial law"));
            }
            if !(c.meet_tolerance >= 0.0) {
                return Err(invalid("/coupling/meet_tolerance", "must be nonnegative"));
            }
        }
        if !(0.0..1.0).contains(&self.fit.burn_in_fraction) {
            return Err(invalid("/fit/burn_in_fraction", "must lie in [0, 1)"));
        }
        if !(self.fit.floor_multiple >= 1.0) {
            return Err(invalid("/fit/floor_multiple", "must be at least 1"));
        }
        if let Some(p) = &self.pde {
            if d != 1 {
                return Err(invalid("/pde", "the density solver is one-dimensional"));
            }
            if !(p.upper > p.lower) || p.cells < 2 {
                return Err(invalid("/pde", "need lower < upper and at least two cells"));
            }
            if let PdeInitial::Gaussian { sd, .. } = p.initial {
                if !(sd > 0.0) {
                    return Err(invalid("/pde/initial/sd", "must be positive"));
                }
            }
        }
        if let Some(f) = &self.fixed_point {
            let dt = f.dt.unwrap_or(it.dt);
            step_count(dt, f.t_stat).map_err(|e| invalid("/fixed_point/t_stat", e.to_string()))?;
            if f.max_iters == 0 || !(f.tol > 0.0) {
                return Err(invalid("/fixed_point", "need max_iters ≥ 1 and tol > 0"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointer_paths() {
        assert_eq!(pointer("model"), "/model");
        assert_eq!(pointer("metrics[1].p"), "/metrics/1/p");
        assert_eq!(pointer("."), "/");
    }
}

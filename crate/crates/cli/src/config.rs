//! Experiment configuration file.
//!
//! A single TOML document with the sections `[problem]`, `[estimator]`,
//! `[grid]`, `[diagnostics]`, `[output]` and an optional `[run]`. Unknown keys
//! are rejected. See the repository README for the full schema.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rrsgd_core::harness::{Estimator, ExperimentConfig, GammaRule, InitialPoint};
use rrsgd_core::json::rows_to_matrix;
use rrsgd_core::ProblemSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub problem: ProblemConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run: Option<RunConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKindName {
    Quadratic,
    LogCosh,
    LinearRegression,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    pub kind: ProblemKindName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hessian: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hessian: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation_center: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariate_cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_variance: Option<f64>,
}

/// `"at_optimum"`, `"offset(r)"` or an explicit vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StartPoint {
    Named(String),
    Explicit(Vec<f64>),
}

impl Default for StartPoint {
    fn default() -> Self {
        StartPoint::Named("offset(1)".to_string())
    }
}

impl StartPoint {
    pub fn to_initial(&self) -> Result<InitialPoint, CliError> {
        match self {
            StartPoint::Explicit(v) => Ok(InitialPoint::Explicit(v.clone())),
            StartPoint::Named(s) => {
                let s = s.trim();
                if s == "at_optimum" {
                    return Ok(InitialPoint::AtOptimum);
                }
                s.strip_prefix("offset(")
                    .and_then(|r| r.strip_suffix(')'))
                    .and_then(|r| r.trim().parse::<f64>().ok())
                    .filter(|r| r.is_finite())
                    .map(InitialPoint::Offset)
                    .ok_or_else(|| {
                        CliError::Config(format!(
                            "start point must be \"at_optimum\", \"offset(r)\" or a vector, got {s:?}"
                        ))
                    })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    #[serde(default = "default_kinds")]
    pub kinds: Vec<Estimator>,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default = "default_p")]
    pub p_moments: Vec<u32>,
    #[serde(default)]
    pub theta0: StartPoint,
    #[serde(default)]
    pub control_variate: bool,
}

fn default_kinds() -> Vec<Estimator> {
    vec![Estimator::Pr, Estimator::Rr]
}

fn default_replications() -> usize {
    100
}

fn default_p() -> Vec<u32> {
    vec![2]
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kinds: default_kinds(),
            replications: default_replications(),
            master_seed: 0,
            p_moments: default_p(),
            theta0: StartPoint::default(),
            control_variate: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub n: Vec<u64>,
    #[serde(default = "default_gamma_rule")]
    pub gamma: GammaRule,
    /// Per-estimator step rules, e.g. `[grid.overrides.pr]`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<Estimator, GammaRule>,
}

fn default_gamma_rule() -> GammaRule {
    GammaRule::Power { a: 1.0, beta: 0.5 }
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            n: Vec::new(),
            gamma: default_gamma_rule(),
            overrides: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Step sizes of the stationary-moment table.
    #[serde(default = "default_diag_gammas")]
    pub gammas: Vec<f64>,
    #[serde(default = "default_p")]
    pub p: Vec<u32>,
    #[serde(default = "default_samples")]
    pub samples: u64,
    /// Defaults to `10·m(γ)` per step size.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub burn_in: Option<u64>,
    #[serde(default = "default_decay_gamma")]
    pub decay_gamma: f64,
    /// Defaults to `2·m(γ)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decay_max_k: Option<u64>,
    #[serde(default = "default_decay_reps")]
    pub decay_replications: usize,
    #[serde(default)]
    pub theta0_a: StartPoint,
    #[serde(default = "at_optimum")]
    pub theta0_b: StartPoint,
    #[serde(default)]
    pub seed: u64,
}

fn default_diag_gammas() -> Vec<f64> {
    vec![0.04, 0.02, 0.01]
}

fn default_samples() -> u64 {
    100_000
}

fn default_decay_gamma() -> f64 {
    0.1
}

fn default_decay_reps() -> usize {
    1000
}

fn at_optimum() -> StartPoint {
    StartPoint::Named("at_optimum".to_string())
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            gammas: default_diag_gammas(),
            p: default_p(),
            samples: default_samples(),
            burn_in: None,
            decay_gamma: default_decay_gamma(),
            decay_max_k: None,
            decay_replications: default_decay_reps(),
            theta0_a: StartPoint::default(),
            theta0_b: at_optimum(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "names::results")]
    pub results_csv: String,
    #[serde(default = "names::result_json")]
    pub result_json: String,
    #[serde(default = "names::theory")]
    pub theory_json: String,
    #[serde(default = "names::decay")]
    pub decay_csv: String,
    #[serde(default = "names::stationary")]
    pub stationary_csv: String,
    #[serde(default = "names::run")]
    pub run_json: String,
    #[serde(default = "names::fits")]
    pub fits_json: String,
}

mod names {
    pub fn results() -> String {
        "results.csv".into()
    }
    pub fn result_json() -> String {
        "result.json".into()
    }
    pub fn theory() -> String {
        "theory.json".into()
    }
    pub fn decay() -> String {
        "decay.csv".into()
    }
    pub fn stationary() -> String {
        "stationary.csv".into()
    }
    pub fn run() -> String {
        "run.json".into()
    }
    pub fn fits() -> String {
        "fits.json".into()
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            results_csv: names::results(),
            result_json: names::result_json(),
            theory_json: names::theory(),
            decay_csv: names::decay(),
            stationary_csv: names::stationary(),
            run_json: names::run(),
            fits_json: names::fits(),
        }
    }
}

impl OutputConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        for name in [
            &self.results_csv,
            &self.result_json,
            &self.theory_json,
            &self.decay_csv,
            &self.stationary_csv,
            &self.run_json,
            &self.fits_json,
        ] {
            let plain = std::path::Path::new(name)
                .file_name()
                .is_some_and(|f| f == std::ffi::OsStr::new(name));
            if !plain {
                return Err(CliError::Config(format!(
                    "output name {name:?} must be a plain file name"
                )));
            }
        }
        Ok(())
    }
}

/// A single coupled run for the `run` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub gamma: f64,
    pub n: u64,
    #[serde(default)]
    pub stream_index: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_stride: Option<usize>,
}

fn matrix(name: &str, rows: &Option<Vec<Vec<f64>>>) -> Result<DMatrix<f64>, CliError> {
    let rows = rows
        .as_ref()
        .ok_or_else(|| CliError::Config(format!("problem.{name} is required")))?;
    rows_to_matrix(rows).ok_or_else(|| CliError::Config(format!("problem.{name} has ragged rows")))
}

fn vector(name: &str, v: &Option<Vec<f64>>) -> Result<DVector<f64>, CliError> {
    v.as_ref()
        .map(|v| DVector::from_column_slice(v))
        .ok_or_else(|| CliError::Config(format!("problem.{name} is required")))
}

impl ProblemConfig {
    fn reject_foreign(&self, allowed: &[&str]) -> Result<(), CliError> {
        let present = [
            ("hessian", self.hessian.is_some()),
            ("theta_star", self.theta_star.is_some()),
            ("noise_cov", self.noise_cov.is_some()),
            ("base_hessian", self.base_hessian.is_some()),
            ("base_center", self.base_center.is_some()),
            ("perturbation", self.perturbation.is_some()),
            ("perturbation_center", self.perturbation_center.is_some()),
            ("covariate_cov", self.covariate_cov.is_some()),
            ("label_variance", self.label_variance.is_some()),
        ];
        for (key, set) in present {
            if set && !allowed.contains(&key) {
                return Err(CliError::Config(format!(
                    "problem.{key} does not apply to kind {:?}",
                    self.kind
                )));
            }
        }
        Ok(())
    }

    pub fn build(&self) -> Result<ProblemSpec, CliError> {
        let spec = match self.kind {
            ProblemKindName::Quadratic => {
                self.reject_foreign(&["hessian", "theta_star", "noise_cov"])?;
                ProblemSpec::quadratic(
                    matrix("hessian", &self.hessian)?,
                    vector("theta_star", &self.theta_star)?,
                    matrix("noise_cov", &self.noise_cov)?,
                )
            }
            ProblemKindName::LogCosh => {
                self.reject_foreign(&[
                    "base_hessian",
                    "base_center",
                    "perturbation",
                    "perturbation_center",
                    "noise_cov",
                ])?;
                ProblemSpec::log_cosh(
                    matrix("base_hessian", &self.base_hessian)?,
                    vector("base_center", &self.base_center)?,
                    self.perturbation.ok_or_else(|| {
                        CliError::Config("problem.perturbation is required".into())
                    })?,
                    vector("perturbation_center", &self.perturbation_center)?,
                    matrix("noise_cov", &self.noise_cov)?,
                )
            }
            ProblemKindName::LinearRegression => {
                self.reject_foreign(&["covariate_cov", "theta_star", "label_variance"])?;
                ProblemSpec::linear_regression(
                    matrix("covariate_cov", &self.covariate_cov)?,
                    vector("theta_star", &self.theta_star)?,
                    self.label_variance.ok_or_else(|| {
                        CliError::Config("problem.label_variance is required".into())
                    })?,
                )
            }
        };
        spec.map_err(|e| CliError::Config(format!("problem: {e}")))
    }
}

impl Config {
    pub fn experiment(&self) -> Result<ExperimentConfig, CliError> {
        Ok(ExperimentConfig {
            estimators: self.estimator.kinds.clone(),
            n_grid: self.grid.n.clone(),
            gamma_rule: self.grid.gamma.clone(),
            gamma_overrides: self.grid.overrides.clone(),
            replications: self.estimator.replications,
            master_seed: self.estimator.master_seed,
            p_moments: self.estimator.p_moments.clone(),
            theta0: self.estimator.theta0.to_initial()?,
            control_variate: self.estimator.control_variate,
        })
    }

    /// Resolved configuration as TOML text; parsing it yields `self` again.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes to TOML")
    }
}

/// Parse `text`, apply `KEY=VALUE` overrides to the resolved document and
/// parse again.
pub fn load(text: &str, overrides: &[String]) -> Result<Config, CliError> {
    let parsed: Config =
        toml::from_str(text).map_err(|e| CliError::Config(format!("cannot parse config: {e}")))?;
    if overrides.is_empty() {
        parsed.output.validate()?;
        return Ok(parsed);
    }
    let mut doc = toml::Value::try_from(&parsed)
        .map_err(|e| CliError::Config(format!("cannot resolve config: {e}")))?;
    for item in overrides {
        apply_override(&mut doc, item)?;
    }
    let config: Config = doc
        .try_into()
        .map_err(|e| CliError::Config(format!("invalid override: {e}")))?;
    config.output.validate()?;
    Ok(config)
}

fn apply_override(doc: &mut toml::Value, item: &str) -> Result<(), CliError> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {item:?} is not KEY=VALUE")))?;
    let key = key.trim();
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!(
            "override key {key:?} is malformed"
        )));
    }
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut node = doc;
    for part in parents {
        node = node
            .get_mut(*part)
            .filter(|v| v.is_table())
            .ok_or_else(|| CliError::Config(format!("override key {key:?} does not exist")))?;
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| CliError::Config(format!("override key {key:?} does not exist")))?;
    // optional keys that are absent from the resolved document are still
    // schema keys; unknown names are caught when the document is re-parsed
    table.insert((*last).to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrapper {
        v: toml::Value,
    }
    toml::from_str::<Wrapper>(&format!("v = {raw}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()))
}

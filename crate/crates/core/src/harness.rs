//! Deterministic parallel Monte-Carlo experiments over `(n, γ)` grids.
//!
//! Every grid cell `(n, γ)` owns a seed derived from the master seed and the
//! cell coordinates; replication `r` of the cell reads stream index `r`. PR and
//! RR rows of the same cell therefore see the same noise, and the PR estimate
//! is the tail average of the `γ` chain of the coupled RR run. Replications run
//! on the ambient rayon pool and are reduced in index order, so the output does
//! not depend on the number of workers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{self, Write};

use log::info;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chains::{linearized_tail_mean, run_synchronous, SyncChain};
use crate::diagnostics::{fit_rate_exponent, RateFit};
use crate::error::{Error, Result};
use crate::problems::ProblemSpec;
use crate::rng::{derive_seed, splitmix64, NoiseStream, StreamKey};
use crate::stats;
use crate::theory::TheoryReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Tail Polyak-Ruppert average of the `γ` chain.
    Pr,
    /// `2θ̄^{(γ)} − θ̄^{(2γ)}` over coupled chains.
    Rr,
}

impl Estimator {
    pub fn name(self) -> &'static str {
        match self {
            Estimator::Pr => "pr",
            Estimator::Rr => "rr",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How step sizes are attached to the `n` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum GammaRule {
    /// Every `n` in the grid with every listed `γ`.
    Explicit { values: Vec<f64> },
    /// `γ = a·n^{−β}`.
    Power { a: f64, beta: f64 },
    /// Every listed `γ` with `n = round(horizon/γ)`; the `n` grid is ignored.
    Horizon { values: Vec<f64>, horizon: f64 },
}

impl GammaRule {
    pub fn cells(&self, n_grid: &[u64]) -> Vec<(u64, f64)> {
        match self {
            GammaRule::Explicit { values } => n_grid
                .iter()
                .flat_map(|&n| values.iter().map(move |&g| (n, g)))
                .collect(),
            GammaRule::Power { a, beta } => n_grid
                .iter()
                .map(|&n| (n, a * (n as f64).powf(-beta)))
                .collect(),
            GammaRule::Horizon { values, horizon } => values
                .iter()
                .map(|&g| (((horizon / g).round() as u64).max(1), g))
                .collect(),
        }
    }

    fn validate(&self, errors: &mut Vec<String>, who: &str) {
        match self {
            GammaRule::Explicit { values } | GammaRule::Horizon { values, .. } => {
                if values.is_empty() {
                    errors.push(format!("{who}: gamma list is empty"));
                }
                if values.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
                    errors.push(format!("{who}: step sizes must be positive"));
                }
                if let GammaRule::Horizon { horizon, .. } = self {
                    if !(*horizon > 0.0 && horizon.is_finite()) {
                        errors.push(format!("{who}: horizon must be positive"));
                    }
                }
            }
            GammaRule::Power { a, beta } => {
                if !(*a > 0.0 && a.is_finite()) {
                    errors.push(format!("{who}: power rule needs a > 0"));
                }
                if !(*beta > 0.0 && *beta < 1.0) {
                    errors.push(format!("{who}: power rule needs beta in (0, 1)"));
                }
            }
        }
    }
}

/// Starting point of every chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialPoint {
    AtOptimum,
    /// `θ* + r·u` with `u = (1, …, 1)/√d`.
    Offset(f64),
    Explicit(Vec<f64>),
}

impl InitialPoint {
    pub fn resolve(&self, problem: &ProblemSpec) -> Result<DVector<f64>> {
        let d = problem.dim;
        match self {
            InitialPoint::AtOptimum => Ok(problem.theta_star.clone()),
            InitialPoint::Offset(r) => {
                let u = DVector::from_element(d, 1.0 / (d as f64).sqrt());
                Ok(&problem.theta_star + u * *r)
            }
            InitialPoint::Explicit(v) => {
                Error::check_dim(d, v.len())?;
                Ok(DVector::from_column_slice(v))
            }
        }
    }
}

impl Default for InitialPoint {
    fn default() -> Self {
        InitialPoint::Offset(1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub estimators: Vec<Estimator>,
    pub n_grid: Vec<u64>,
    pub gamma_rule: GammaRule,
    /// Per-estimator replacement for `gamma_rule`.
    #[serde(default)]
    pub gamma_overrides: BTreeMap<Estimator, GammaRule>,
    pub replications: usize,
    pub master_seed: u64,
    #[serde(default = "default_p_moments")]
    pub p_moments: Vec<u32>,
    #[serde(default)]
    pub theta0: InitialPoint,
    /// Estimate bias against a linearized companion chain fed the same draws.
    #[serde(default)]
    pub control_variate: bool,
}

fn default_p_moments() -> Vec<u32> {
    vec![2]
}

impl ExperimentConfig {
    pub fn rule_for(&self, estimator: Estimator) -> &GammaRule {
        self.gamma_overrides
            .get(&estimator)
            .unwrap_or(&self.gamma_rule)
    }

    /// Every problem with the configuration, reported together.
    pub fn validate(&self, problem: &ProblemSpec) -> Result<()> {
        let mut errors = Vec::new();
        if self.estimators.is_empty() {
            errors.push("no estimators selected".to_string());
        }
        if self.replications < 2 {
            errors.push("replications must be at least 2".to_string());
        }
        if self.replications > u32::MAX as usize {
            errors.push("replications exceed the stream index range".to_string());
        }
        if self.p_moments.is_empty() || self.p_moments.iter().any(|&p| p == 0 || p % 2 != 0) {
            errors.push("p_moments must be non-empty positive even integers".to_string());
        }
        let needs_grid = self
            .estimators
            .iter()
            .any(|&e| !matches!(self.rule_for(e), GammaRule::Horizon { .. }));
        if needs_grid && self.n_grid.is_empty() {
            errors.push("n grid is empty".to_string());
        }
        if self.n_grid.contains(&0) {
            errors.push("n grid entries must be positive".to_string());
        }
        if let Err(e) = self.theta0.resolve(problem) {
            errors.push(format!("theta0: {e}"));
        }
        let bound = 1.0 / (2.0 * problem.smoothness);
        for &e in &self.estimators {
            let rule = self.rule_for(e);
            let before = errors.len();
            rule.validate(&mut errors, e.name());
            if errors.len() > before {
                continue;
            }
            if e == Estimator::Rr {
                for (n, g) in rule.cells(&self.n_grid) {
                    if 2.0 * g > bound {
                        errors.push(format!(
                            "rr: 2*gamma = {} at n = {n} exceeds the step bound 1/(2L) = {bound}",
                            2.0 * g
                        ));
                    }
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors.join("; ")))
        }
    }
}

/// Seed of grid cell `(n, γ)`.
pub fn cell_seed(master_seed: u64, n: u64, gamma: f64) -> u64 {
    derive_seed(master_seed, splitmix64(n) ^ gamma.to_bits())
}

/// Aggregate over the replications of one `(estimator, n, γ, p)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub estimator: Estimator,
    pub n: u64,
    pub gamma: f64,
    pub p: u32,
    /// `E^{1/p}‖H*(θ̂ − θ*)‖ᵖ`
    pub error_moment: f64,
    pub std_err: f64,
    /// `E^{1/p}‖θ̂ − θ*‖ᵖ`
    pub error_moment_unweighted: f64,
    pub std_err_unweighted: f64,
    #[serde(serialize_with = "crate::json::vector")]
    pub bias_vector: DVector<f64>,
    #[serde(serialize_with = "crate::json::vector")]
    pub bias_std_err: DVector<f64>,
    pub bias_norm: f64,
    pub replications: usize,
    pub divergent: usize,
    pub valid: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub config_hash: Option<String>,
    pub master_seed: u64,
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub rows: Vec<ResultRow>,
    pub rate_fits: BTreeMap<String, RateFit>,
    pub theory: TheoryReport,
    pub provenance: Provenance,
    pub notes: Vec<String>,
    pub config: ExperimentConfig,
}

impl ExperimentResult {
    pub fn invalid_rows(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| !r.valid)
    }

    pub fn row(&self, estimator: Estimator, n: u64, gamma: f64, p: u32) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.n == n && r.gamma == gamma && r.p == p)
    }
}

/// Estimates of one replication: the estimator and, with a control variate,
/// the same estimator built from the linearized companions.
#[derive(Debug, Clone)]
struct Replicate {
    pr: DVector<f64>,
    rr: Option<DVector<f64>>,
    pr_linear: Option<DVector<f64>>,
    rr_linear: Option<DVector<f64>>,
}

struct Cell<'a> {
    problem: &'a ProblemSpec,
    theta0: &'a DVector<f64>,
    n: u64,
    gamma: f64,
    with_rr: bool,
    control_variate: bool,
}

impl Cell<'_> {
    fn chains(&self) -> Vec<SyncChain> {
        let mut chains = vec![SyncChain::sgd(self.gamma)];
        if self.with_rr {
            chains.push(SyncChain::sgd(2.0 * self.gamma));
        }
        if self.control_variate {
            chains.push(SyncChain::linearized(self.gamma));
            if self.with_rr {
                chains.push(SyncChain::linearized(2.0 * self.gamma));
            }
        }
        chains
    }

    fn replicate(&self, chains: &[SyncChain], key: StreamKey) -> Option<Replicate> {
        let mut stream = NoiseStream::from_key(key);
        let out = run_synchronous(self.problem, self.theta0, chains, self.n, &mut stream).ok()?;
        let mut avgs = out.into_iter().map(|s| s.tail_average);
        let pr = avgs.next()?;
        let two = if self.with_rr { avgs.next() } else { None };
        let rr = two.map(|b| &pr * 2.0 - b);
        let (pr_linear, rr_linear) = if self.control_variate {
            let lp = avgs.next()?;
            let lr = if self.with_rr {
                avgs.next().map(|b| &lp * 2.0 - b)
            } else {
                None
            };
            (Some(lp), lr)
        } else {
            (None, None)
        };
        Some(Replicate {
            pr,
            rr,
            pr_linear,
            rr_linear,
        })
    }

    fn run(&self, seed: u64, replications: usize) -> Vec<Option<Replicate>> {
        let chains = self.chains();
        (0..replications)
            .into_par_iter()
            .map(|r| self.replicate(&chains, StreamKey::new(seed, r as u32)))
            .collect()
    }

    /// Exact mean of the linearized version of `estimator`.
    fn linear_mean(&self, estimator: Estimator) -> Result<DVector<f64>> {
        let a = linearized_tail_mean(self.problem, self.theta0, self.gamma, self.n)?;
        Ok(match estimator {
            Estimator::Pr => a,
            Estimator::Rr => {
                let b = linearized_tail_mean(self.problem, self.theta0, 2.0 * self.gamma, self.n)?;
                a * 2.0 - b
            }
        })
    }
}

fn aggregate(
    cell: &Cell<'_>,
    estimator: Estimator,
    reps: &[Option<Replicate>],
    p_list: &[u32],
    h: &DMatrix<f64>,
) -> Result<Vec<ResultRow>> {
    let d = cell.problem.dim;
    let star = &cell.problem.theta_star;
    let mut estimates = Vec::with_capacity(reps.len());
    let mut linear = Vec::new();
    for rep in reps.iter().flatten() {
        let (est, lin) = match estimator {
            Estimator::Pr => (&rep.pr, rep.pr_linear.as_ref()),
            Estimator::Rr => (
                rep.rr.as_ref().expect("rr chains ran"),
                rep.rr_linear.as_ref(),
            ),
        };
        estimates.push(est.clone());
        if let Some(l) = lin {
            linear.push(l.clone());
        }
    }
    let divergent = reps.len() - estimates.len();
    let weighted: Vec<f64> = estimates.iter().map(|e| (h * (e - star)).norm()).collect();
    let plain: Vec<f64> = estimates.iter().map(|e| (e - star).norm()).collect();

    let mut bias_vector = DVector::zeros(d);
    let mut bias_std_err = DVector::zeros(d);
    let offset = if cell.control_variate {
        cell.linear_mean(estimator)? - star
    } else {
        DVector::zeros(d)
    };
    let mut column = vec![0.0; estimates.len()];
    for i in 0..d {
        for (r, e) in estimates.iter().enumerate() {
            column[r] = if cell.control_variate {
                e[i] - linear[r][i]
            } else {
                e[i] - star[i]
            };
        }
        bias_vector[i] = stats::mean(&column) + offset[i];
        bias_std_err[i] = stats::std_err(&column);
    }
    let bias_norm = bias_vector.norm();

    Ok(p_list
        .iter()
        .map(|&p| {
            let (error_moment, std_err) = stats::root_moment_jackknife(&weighted, p);
            let (error_moment_unweighted, std_err_unweighted) =
                stats::root_moment_jackknife(&plain, p);
            ResultRow {
                estimator,
                n: cell.n,
                gamma: cell.gamma,
                p,
                error_moment,
                std_err,
                error_moment_unweighted,
                std_err_unweighted,
                bias_vector: bias_vector.clone(),
                bias_std_err: bias_std_err.clone(),
                bias_norm,
                replications: reps.len(),
                divergent,
                valid: divergent == 0,
            }
        })
        .collect())
}

fn run_cell(
    problem: &ProblemSpec,
    theta0: &DVector<f64>,
    estimators: &BTreeSet<Estimator>,
    n: u64,
    gamma: f64,
    config: &ExperimentConfig,
    h: &DMatrix<f64>,
) -> Result<Vec<ResultRow>> {
    let cell = Cell {
        problem,
        theta0,
        n,
        gamma,
        with_rr: estimators.contains(&Estimator::Rr),
        control_variate: config.control_variate,
    };
    let reps = cell.run(cell_seed(config.master_seed, n, gamma), config.replications);
    let mut rows = Vec::new();
    for &e in estimators {
        rows.extend(aggregate(&cell, e, &reps, &config.p_moments, h)?);
    }
    Ok(rows)
}

/// Rows of a single grid cell; identical to the matching rows of
/// [`run_experiment`] for the same master seed.
#[allow(clippy::too_many_arguments)]
pub fn estimate_error_moments(
    problem: &ProblemSpec,
    theta0: &DVector<f64>,
    estimator: Estimator,
    n: u64,
    gamma: f64,
    p_list: &[u32],
    replications: usize,
    master_seed: u64,
) -> Result<Vec<ResultRow>> {
    let config = ExperimentConfig {
        estimators: vec![estimator],
        n_grid: vec![n],
        gamma_rule: GammaRule::Explicit {
            values: vec![gamma],
        },
        gamma_overrides: BTreeMap::new(),
        replications,
        master_seed,
        p_moments: p_list.to_vec(),
        theta0: InitialPoint::Explicit(theta0.iter().cloned().collect()),
        control_variate: false,
    };
    config.validate(problem)?;
    let h = problem.hessian_at_opt();
    run_cell(
        problem,
        theta0,
        &BTreeSet::from([estimator]),
        n,
        gamma,
        &config,
        &h,
    )
}

/// Run the full grid of `config` on the current rayon pool.
pub fn run_experiment(
    problem: &ProblemSpec,
    config: &ExperimentConfig,
) -> Result<ExperimentResult> {
    config.validate(problem)?;
    let theory = TheoryReport::compute(problem)?;
    let theta0 = config.theta0.resolve(problem)?;
    let h = problem.hessian_at_opt();

    // group estimators by cell so that PR and RR at the same (n, γ) share one run
    let mut cells: BTreeMap<(u64, u64), BTreeSet<Estimator>> = BTreeMap::new();
    for &e in &config.estimators {
        for (n, g) in config.rule_for(e).cells(&config.n_grid) {
            cells.entry((n, g.to_bits())).or_default().insert(e);
        }
    }
    let mut rows = Vec::new();
    for ((n, gbits), estimators) in &cells {
        let gamma = f64::from_bits(*gbits);
        info!("cell n={n} gamma={gamma} estimators={estimators:?}");
        rows.extend(run_cell(
            problem, &theta0, estimators, *n, gamma, config, &h,
        )?);
    }
    rows.sort_by(|a, b| {
        (a.estimator, a.n, a.p)
            .cmp(&(b.estimator, b.n, b.p))
            .then(a.gamma.total_cmp(&b.gamma))
    });

    let mut notes = vec![
        "error_moment is E^{1/p}|H*(estimate - theta*)|^p with jackknife standard errors"
            .to_string(),
        "higher-moment rates presuppose noise and stationary moment bounds of order 3p, \
         which the harness cannot verify; only the measured scaling is reported"
            .to_string(),
    ];
    if config.control_variate {
        notes.push(
            "bias_vector uses a linearized companion chain driven by the same draws as a \
             control variate; its exact mean is added back"
                .to_string(),
        );
    }
    let mut result = ExperimentResult {
        rows,
        rate_fits: BTreeMap::new(),
        theory,
        provenance: Provenance {
            config_hash: None,
            master_seed: config.master_seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        notes,
        config: config.clone(),
    };
    attach_rate_fits(&mut result);
    Ok(result)
}

/// Run on a dedicated pool with `workers` threads.
pub fn run_experiment_with_workers(
    problem: &ProblemSpec,
    config: &ExperimentConfig,
    workers: usize,
) -> Result<ExperimentResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::arg(format!("cannot build worker pool: {e}")))?;
    pool.install(|| run_experiment(problem, config))
}

fn rows_on_rule<'a>(
    result: &'a ExperimentResult,
    estimator: Estimator,
    rule: &GammaRule,
    p: u32,
) -> Vec<&'a ResultRow> {
    let cells = rule.cells(&result.config.n_grid);
    let mut rows: Vec<&ResultRow> = result
        .rows
        .iter()
        .filter(|r| {
            r.estimator == estimator
                && r.p == p
                && cells.iter().any(|&(n, g)| n == r.n && g == r.gamma)
        })
        .collect();
    rows.sort_by_key(|r| r.n);
    rows
}

fn attach_rate_fits(result: &mut ExperimentResult) {
    let (fits, notes) = compute_rate_fits(result);
    result.rate_fits = fits;
    result.notes.extend(notes);
}

/// Rate fits of a result: bias against `γ` per estimator (when at least three
/// step sizes were run), error moment against `n` and the second-order
/// residual fit (when the estimator's rule gives one `γ` per `n`). Fits that
/// cannot be formed are explained in the returned notes.
pub fn compute_rate_fits(result: &ExperimentResult) -> (BTreeMap<String, RateFit>, Vec<String>) {
    let mut fits = BTreeMap::new();
    let mut notes = Vec::new();
    let p_fit = if result.config.p_moments.contains(&2) {
        2
    } else {
        result.config.p_moments[0]
    };
    for &e in &result.config.estimators {
        let rule = result.config.rule_for(e).clone();

        // bias against γ, using the longest run at each γ
        let mut by_gamma: BTreeMap<u64, &ResultRow> = BTreeMap::new();
        for r in result
            .rows
            .iter()
            .filter(|r| r.estimator == e && r.p == p_fit)
        {
            let slot = by_gamma.entry(r.gamma.to_bits()).or_insert(r);
            if r.n > slot.n {
                *slot = r;
            }
        }
        if by_gamma.len() >= 3 {
            let pts: Vec<(f64, f64)> = by_gamma.values().map(|r| (r.gamma, r.bias_norm)).collect();
            match fit_rate_exponent(&pts) {
                Ok(fit) => {
                    fits.insert(format!("{e}_bias_vs_gamma"), fit);
                }
                Err(err) => notes.push(format!("{e}_bias_vs_gamma not fitted: {err}")),
            }
        }

        let single_gamma = match &rule {
            GammaRule::Power { .. } => true,
            GammaRule::Explicit { values } => values.len() == 1,
            GammaRule::Horizon { .. } => false,
        };
        if !single_gamma {
            continue;
        }
        for &p in &result.config.p_moments {
            let rows = rows_on_rule(result, e, &rule, p);
            if rows.len() < 3 {
                continue;
            }
            let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.n as f64, r.error_moment)).collect();
            let name = if p == 2 {
                format!("{e}_error_vs_n")
            } else {
                format!("{e}_error_vs_n_p{p}")
            };
            match fit_rate_exponent(&pts) {
                Ok(fit) => {
                    fits.insert(name, fit);
                }
                Err(err) => notes.push(format!("{name} not fitted: {err}")),
            }
        }
        if result.config.p_moments.contains(&2) {
            match second_order_residual(result, e, &rule) {
                Ok(fit) => {
                    fits.insert(format!("{e}_second_order"), fit);
                }
                Err(err) => notes.push(format!("{e}_second_order not fitted: {err}")),
            }
        }
    }
    (fits, notes)
}

/// Residuals `max(error_moment − √TrΣ/√n, 2·std_err)` of the p = 2 rows of
/// `estimator` on `gamma_rule`.
pub fn second_order_residuals(
    result: &ExperimentResult,
    estimator: Estimator,
    gamma_rule: &GammaRule,
) -> Vec<(u64, f64, bool)> {
    let trace = result.theory.trace_noise_cov;
    rows_on_rule(result, estimator, gamma_rule, 2)
        .into_iter()
        .filter(|r| r.valid)
        .map(|r| {
            let residual = r.error_moment - (trace / r.n as f64).sqrt();
            let floor = 2.0 * r.std_err;
            if residual > floor {
                (r.n, residual, false)
            } else {
                (r.n, floor, true)
            }
        })
        .collect()
}

/// Fit the decay exponent of the part of the p = 2 error beyond the leading
/// `√TrΣ/√n` term. Residuals below twice the row standard error are censored
/// at that floor; if every point is censored the fit is degenerate.
pub fn second_order_residual(
    result: &ExperimentResult,
    estimator: Estimator,
    gamma_rule: &GammaRule,
) -> Result<RateFit> {
    let residuals = second_order_residuals(result, estimator, gamma_rule);
    let distinct: BTreeSet<u64> = residuals.iter().map(|r| r.0).collect();
    if distinct.len() < 3 {
        return Err(Error::arg(format!(
            "second-order fit needs at least three n values for {estimator}, found {}",
            distinct.len()
        )));
    }
    if residuals.iter().all(|r| r.2) {
        return Err(Error::DegenerateFit(format!(
            "every {estimator} residual is below twice its standard error"
        )));
    }
    let pts: Vec<(f64, f64)> = residuals.iter().map(|&(n, r, _)| (n as f64, r)).collect();
    fit_rate_exponent(&pts)
}

pub const RESULTS_CSV_HEADER: &str =
    "estimator,n,gamma,p,error_moment,std_err,bias_norm,replications,valid";

pub fn write_results_csv<W: Write>(rows: &[ResultRow], mut w: W) -> io::Result<()> {
    writeln!(w, "{RESULTS_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.estimator,
            r.n,
            r.gamma,
            r.p,
            r.error_moment,
            r.std_err,
            r.bias_norm,
            r.replications,
            r.valid
        )?;
    }
    Ok(())
}

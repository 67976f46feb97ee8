use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use nalgebra::DVector;
use rayon::prelude::*;
use rrsgd_core::chains::{run_coupled_rr, run_tail_averaged, ChainRun};
use rrsgd_core::diagnostics::{
    coupling_contraction_curve, decomposition_audit, default_burn_in, m_gamma,
    stationary_moment_estimate, write_stationary_csv,
};
use rrsgd_core::harness::{
    compute_rate_fits, run_experiment, write_results_csv, Estimator, ExperimentResult, Provenance,
    ResultRow,
};
use rrsgd_core::rng::{derive_seed, NoiseStream, StreamKey};
use rrsgd_core::{ProblemSpec, TheoryReport};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{self, Config};
use crate::error::CliError;
use crate::Common;

/// A validated configuration with the text it was resolved to.
struct Loaded {
    config: Config,
    resolved: String,
    hash: String,
    problem: ProblemSpec,
}

fn load(common: &Common) -> Result<Loaded, CliError> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let config = config::load(&text, &common.overrides)?;
    let problem = config.problem.build()?;
    let resolved = config.to_toml();
    let hash = hex::encode(Sha256::digest(resolved.as_bytes()));
    Ok(Loaded {
        config,
        resolved,
        hash,
        problem,
    })
}

impl Loaded {
    fn provenance(&self) -> Value {
        json!({
            "config_sha256": self.hash,
            "master_seed": self.config.estimator.master_seed,
            "code_version": env!("CARGO_PKG_VERSION"),
        })
    }
}

/// Write every `(name, bytes)` pair into `dir`, each through a temporary file
/// renamed into place.
fn write_outputs(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<(), CliError> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(dir.join(name)).map_err(|e| e.error)?;
        info!("wrote {}", dir.join(name).display());
    }
    Ok(())
}

fn json_bytes(value: &Value) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("json value serializes");
    out.push(b'\n');
    out
}

fn vec_json(v: &DVector<f64>) -> Value {
    json!(v.iter().collect::<Vec<_>>())
}

pub fn theory(common: &Common) -> Result<(), CliError> {
    let loaded = load(common)?;
    let report = TheoryReport::compute(&loaded.problem)?;
    let mut value = serde_json::to_value(&report).expect("report serializes");
    value["problem"] = json!(loaded.problem.kind.name());
    value["provenance"] = loaded.provenance();
    write_outputs(
        &common.out,
        &[(
            loaded.config.output.theory_json.as_str(),
            json_bytes(&value),
        )],
    )
}

fn chain_json(run: &ChainRun) -> Value {
    json!({
        "gamma": run.gamma,
        "n": run.n,
        "tail_average": vec_json(&run.tail_average),
        "theta_at_n_plus_1": vec_json(&run.theta_at_n_plus_1),
        "theta_at_2n": vec_json(&run.theta_at_2n),
    })
}

pub fn run(common: &Common) -> Result<(), CliError> {
    let loaded = load(common)?;
    let run_cfg = loaded
        .config
        .run
        .clone()
        .ok_or_else(|| CliError::Config("the run subcommand needs a [run] section".into()))?;
    if run_cfg.record_stride == Some(0) {
        return Err(CliError::Config(
            "run.record_stride must be positive".into(),
        ));
    }
    let problem = &loaded.problem;
    let theta0 = loaded
        .config
        .estimator
        .theta0
        .to_initial()?
        .resolve(problem)?;
    let key = StreamKey::new(loaded.config.estimator.master_seed, run_cfg.stream_index);
    let coupled = run_coupled_rr(problem, &theta0, run_cfg.gamma, run_cfg.n, key)?;
    let mut value = json!({
        "theta_star": vec_json(&problem.theta_star),
        "theta0": vec_json(&theta0),
        "stream_index": run_cfg.stream_index,
        "run_gamma": chain_json(&coupled.run_gamma),
        "run_2gamma": chain_json(&coupled.run_2gamma),
        "rr_estimate": vec_json(&coupled.rr_estimate),
    });
    if let Some(stride) = run_cfg.record_stride {
        let mut stream = NoiseStream::from_key(key);
        let recorded = run_tail_averaged(
            problem,
            &theta0,
            run_cfg.gamma,
            run_cfg.n,
            &mut stream,
            Some(stride),
        )?;
        let path = recorded.recorded_path.as_ref().expect("path was requested");
        value["recorded_path"] = json!({
            "stride": stride,
            "iterates": path.iterates.iter().map(|v| v.iter().cloned().collect::<Vec<_>>()).collect::<Vec<_>>(),
        });
        if stride == 1 {
            let audit = decomposition_audit(problem, &recorded)?;
            value["decomposition_audit"] = json!({
                "max_residual": audit.max_residual,
                "relative": audit.relative(),
            });
        }
    }
    value["provenance"] = loaded.provenance();
    write_outputs(
        &common.out,
        &[(loaded.config.output.run_json.as_str(), json_bytes(&value))],
    )
}

pub fn diagnose(common: &Common) -> Result<(), CliError> {
    let loaded = load(common)?;
    let problem = &loaded.problem;
    let diag = &loaded.config.diagnostics;
    let positive = |g: f64| g > 0.0;
    if !positive(diag.decay_gamma) || !diag.gammas.iter().all(|&g| positive(g)) {
        return Err(CliError::Config(
            "diagnostics step sizes must be positive".into(),
        ));
    }
    let a = diag.theta0_a.to_initial()?.resolve(problem)?;
    let b = diag.theta0_b.to_initial()?.resolve(problem)?;
    let max_k = diag
        .decay_max_k
        .unwrap_or_else(|| 2 * m_gamma(diag.decay_gamma, problem.mu));
    let curve = coupling_contraction_curve(
        problem,
        diag.decay_gamma,
        &a,
        &b,
        max_k,
        diag.decay_replications,
        diag.seed,
    )?;

    let jobs: Vec<(f64, u32)> = diag
        .gammas
        .iter()
        .flat_map(|&g| diag.p.iter().map(move |&p| (g, p)))
        .collect();
    let rows = jobs
        .par_iter()
        .map(|&(g, p)| {
            let burn_in = diag
                .burn_in
                .unwrap_or_else(|| default_burn_in(g, problem.mu));
            let seed = derive_seed(diag.seed, g.to_bits());
            stationary_moment_estimate(problem, g, p, burn_in, diag.samples, seed)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut decay = Vec::new();
    curve.write_csv(&mut decay)?;
    let mut stationary = Vec::new();
    write_stationary_csv(&rows, &mut stationary)?;
    write_outputs(
        &common.out,
        &[
            (loaded.config.output.decay_csv.as_str(), decay),
            (loaded.config.output.stationary_csv.as_str(), stationary),
        ],
    )
}

fn result_json(loaded: &Loaded, result: &ExperimentResult) -> Value {
    let mut value = serde_json::to_value(result).expect("result serializes");
    value["config_toml"] = json!(loaded.resolved);
    value
}

pub fn experiment(common: &Common) -> Result<(), CliError> {
    let loaded = load(common)?;
    let cfg = loaded.config.experiment()?;
    let mut result = run_experiment(&loaded.problem, &cfg)?;
    result.provenance = Provenance {
        config_hash: Some(loaded.hash.clone()),
        ..result.provenance
    };
    let mut csv = Vec::new();
    write_results_csv(&result.rows, &mut csv)?;
    let json = json_bytes(&result_json(&loaded, &result));
    write_outputs(
        &common.out,
        &[
            (loaded.config.output.results_csv.as_str(), csv),
            (loaded.config.output.result_json.as_str(), json),
        ],
    )?;
    let invalid: Vec<&ResultRow> = result.invalid_rows().collect();
    if invalid.is_empty() {
        return Ok(());
    }
    for row in &invalid {
        eprintln!(
            "invalid row: estimator={} n={} gamma={} p={} divergent={}/{}",
            row.estimator, row.n, row.gamma, row.p, row.divergent, row.replications
        );
    }
    Err(CliError::InvalidRows(invalid.len()))
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    estimator: Estimator,
    n: u64,
    gamma: f64,
    p: u32,
    error_moment: f64,
    std_err: f64,
    bias_norm: f64,
    replications: usize,
    valid: bool,
}

pub fn fit(common: &Common) -> Result<(), CliError> {
    let loaded = load(common)?;
    let cfg = loaded.config.experiment()?;
    let path = common.out.join(&loaded.config.output.results_csv);
    let mut reader = csv::Reader::from_path(&path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.deserialize::<CsvRow>() {
        let r = record.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        rows.push(ResultRow {
            estimator: r.estimator,
            n: r.n,
            gamma: r.gamma,
            p: r.p,
            error_moment: r.error_moment,
            std_err: r.std_err,
            error_moment_unweighted: f64::NAN,
            std_err_unweighted: f64::NAN,
            bias_vector: DVector::zeros(0),
            bias_std_err: DVector::zeros(0),
            bias_norm: r.bias_norm,
            replications: r.replications,
            divergent: 0,
            valid: r.valid,
        });
    }
    let result = ExperimentResult {
        rows,
        rate_fits: Default::default(),
        theory: TheoryReport::compute(&loaded.problem)?,
        provenance: Provenance {
            config_hash: Some(loaded.hash.clone()),
            master_seed: cfg.master_seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        notes: Vec::new(),
        config: cfg,
    };
    let (fits, notes) = compute_rate_fits(&result);
    let value = json!({
        "rate_fits": fits,
        "notes": notes,
        "provenance": loaded.provenance(),
    });
    write_outputs(
        &common.out,
        &[(loaded.config.output.fits_json.as_str(), json_bytes(&value))],
    )
}

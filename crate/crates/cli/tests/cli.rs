use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const QUADRATIC: &str = r#"
[problem]
kind = "quadratic"
hessian = [[1.0]]
theta_star = [0.0]
noise_cov = [[1.0]]
"#;

fn rrsgd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rrsgd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, body).unwrap();
    path
}

fn run_in(dir: &Path, sub: &str, config: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap(), "--out", out];
    args.extend_from_slice(extra);
    rrsgd(&args, dir)
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_touches_nothing() {
    let dir = tempfile::tempdir().unwrap();
    for sub in ["theory", "run", "diagnose", "experiment", "fit"] {
        let out = rrsgd(&[sub, "--help"], dir.path());
        assert!(out.status.success(), "{sub}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("--config"));
    }
    assert!(rrsgd(&["--help"], dir.path()).status.success());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn malformed_config_exits_2_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[problem\nkind = 3");
    for sub in ["theory", "experiment", "diagnose"] {
        let out = run_in(dir.path(), sub, &cfg, "out", &[]);
        assert_eq!(out.status.code(), Some(2), "{sub}");
    }
    let missing = run_in(
        dir.path(),
        "theory",
        &dir.path().join("nope.toml"),
        "out",
        &[],
    );
    assert_eq!(missing.status.code(), Some(2));
    let unknown = write_config(dir.path(), &format!("{QUADRATIC}\n[grid]\nsteps = 3\n"));
    assert_eq!(
        run_in(dir.path(), "experiment", &unknown, "out", &[])
            .status
            .code(),
        Some(2)
    );
    assert!(!dir.path().join("out").exists());
}

#[test]
fn bad_override_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUADRATIC);
    let out = run_in(
        dir.path(),
        "theory",
        &cfg,
        "out",
        &["--set", "estimator.nonsense=1"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = run_in(dir.path(), "theory", &cfg, "out", &["--set", "noequals"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn theory_of_unit_quadratic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), QUADRATIC);
    let out = run_in(dir.path(), "theory", &cfg, "out", &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let theory = read_json(dir.path().join("out/theory.json"));
    assert_eq!(theory["tc_matrix"], serde_json::json!([[0.5]]));
    assert_eq!(theory["delta1"], serde_json::json!([0.0]));
    assert_eq!(theory["trace_noise_cov"], 1.0);
    assert_eq!(
        theory["provenance"]["config_sha256"]
            .as_str()
            .unwrap()
            .len(),
        64
    );
}

#[test]
fn log_cosh_theory_has_nonzero_bias() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"
[problem]
kind = "log_cosh"
base_hessian = [[1.0]]
base_center = [0.0]
perturbation = 1.0
perturbation_center = [0.5]
noise_cov = [[1.0]]
"#,
    );
    assert!(run_in(dir.path(), "theory", &cfg, "out", &[])
        .status
        .success());
    let theory = read_json(dir.path().join("out/theory.json"));
    assert!(theory["delta1"][0].as_f64().unwrap().abs() > 1e-3);
}

#[test]
fn experiment_is_reproducible_from_echoed_config() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{QUADRATIC}\n[estimator]\nkinds = [\"pr\"]\nreplications = 20\nmaster_seed = 9\np_moments = [2]\n\n[grid]\nn = [100]\ngamma = {{ rule = \"explicit\", values = [0.1] }}\n"
    );
    let cfg = write_config(dir.path(), &body);
    let first = run_in(dir.path(), "experiment", &cfg, "a", &[]);
    assert!(
        first.status.success(),
        "{}",
        String::from_utf8_lossy(&first.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("a/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(
        csv.starts_with("estimator,n,gamma,p,error_moment,std_err,bias_norm,replications,valid\n")
    );

    assert!(run_in(dir.path(), "experiment", &cfg, "b", &[])
        .status
        .success());
    assert_eq!(
        csv,
        fs::read_to_string(dir.path().join("b/results.csv")).unwrap()
    );

    let result = read_json(dir.path().join("a/result.json"));
    let echoed = dir.path().join("echoed.toml");
    fs::write(&echoed, result["config_toml"].as_str().unwrap()).unwrap();
    assert!(run_in(dir.path(), "experiment", &echoed, "c", &[])
        .status
        .success());
    assert_eq!(
        csv,
        fs::read_to_string(dir.path().join("c/results.csv")).unwrap()
    );
    assert_eq!(
        fs::read(dir.path().join("a/result.json")).unwrap(),
        fs::read(dir.path().join("c/result.json")).unwrap()
    );

    let seeded = run_in(
        dir.path(),
        "experiment",
        &cfg,
        "d",
        &["--set", "estimator.master_seed=10"],
    );
    assert!(seeded.status.success());
    assert_ne!(
        csv,
        fs::read_to_string(dir.path().join("d/results.csv")).unwrap()
    );
}

#[test]
fn divergent_rows_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{QUADRATIC}\n[estimator]\nkinds = [\"pr\"]\nreplications = 4\np_moments = [2]\n\n[grid]\nn = [2000]\ngamma = {{ rule = \"explicit\", values = [2.5] }}\n"
    );
    let cfg = write_config(dir.path(), &body);
    let out = run_in(dir.path(), "experiment", &cfg, "out", &[]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("invalid row"));
    let csv = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().ends_with(",false"));
}

#[test]
fn rr_step_above_bound_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{QUADRATIC}\n[grid]\nn = [10]\ngamma = {{ rule = \"explicit\", values = [0.4] }}\n"
    );
    let cfg = write_config(dir.path(), &body);
    assert_eq!(
        run_in(dir.path(), "experiment", &cfg, "out", &[])
            .status
            .code(),
        Some(2)
    );
    assert!(!dir.path().join("out").exists());
}

#[test]
fn diagnose_records_block_length_and_equal_starts_stay_coupled() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{QUADRATIC}\n[diagnostics]\ngammas = [0.04, 0.02]\np = [2]\nsamples = 20000\ndecay_gamma = 0.1\ndecay_replications = 50\ntheta0_a = \"at_optimum\"\ntheta0_b = \"at_optimum\"\n"
    );
    let cfg = write_config(dir.path(), &body);
    let out = run_in(dir.path(), "diagnose", &cfg, "out", &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let decay = fs::read_to_string(dir.path().join("out/decay.csv")).unwrap();
    assert!(decay.starts_with("# m_gamma=28\n"));
    let data: Vec<&str> = decay
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .collect();
    assert_eq!(data.len(), 57);
    for line in data {
        let value: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert_eq!(value, 0.0);
    }
    let stationary = fs::read_to_string(dir.path().join("out/stationary.csv")).unwrap();
    assert_eq!(stationary.lines().count(), 3);
}

#[test]
fn run_writes_audited_path() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{QUADRATIC}\n[run]\ngamma = 0.05\nn = 200\nrecord_stride = 1\n");
    let cfg = write_config(dir.path(), &body);
    let out = run_in(dir.path(), "run", &cfg, "out", &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run = read_json(dir.path().join("out/run.json"));
    assert_eq!(
        run["recorded_path"]["iterates"].as_array().unwrap().len(),
        401
    );
    assert!(run["decomposition_audit"]["relative"].as_f64().unwrap() < 1e-10);
    let rr = run["rr_estimate"][0].as_f64().unwrap();
    let a = run["run_gamma"]["tail_average"][0].as_f64().unwrap();
    let b = run["run_2gamma"]["tail_average"][0].as_f64().unwrap();
    assert_eq!(rr, 2.0 * a - b);

    let no_run = write_config(dir.path(), QUADRATIC);
    assert_eq!(
        run_in(dir.path(), "run", &no_run, "x", &[]).status.code(),
        Some(2)
    );
}

#[test]
fn fit_rebuilds_rate_fits_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!(
        "{QUADRATIC}\n[estimator]\nreplications = 200\np_moments = [2]\n\n[grid]\nn = [100, 400, 1600]\n"
    );
    let cfg = write_config(dir.path(), &body);
    assert!(run_in(dir.path(), "experiment", &cfg, "out", &[])
        .status
        .success());
    let out = run_in(dir.path(), "fit", &cfg, "out", &[]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let fits = read_json(dir.path().join("out/fits.json"));
    let result = read_json(dir.path().join("out/result.json"));
    for name in ["pr_error_vs_n", "rr_error_vs_n"] {
        let slope = fits["rate_fits"][name]["slope"].as_f64().unwrap();
        assert!((slope + 0.5).abs() < 0.15, "{name}: {slope}");
        let direct = result["rate_fits"][name]["slope"].as_f64().unwrap();
        assert!((slope - direct).abs() < 1e-9);
    }
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(
        run_in(empty.path(), "fit", &cfg, "out", &[]).status.code(),
        Some(2)
    );
}

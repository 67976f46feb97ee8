//! Empirical checks of the Markov-chain behaviour of constant step-size SGD:
//! coupling contraction under the cost `c`, stationary moments, rate fits and
//! the summation-by-parts audit of the tail average.

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::chains::{sgd_step, ChainRun};
use crate::error::{Error, Result};
use crate::problems::ProblemSpec;
use crate::rng::{NoiseStream, StreamKey};
use crate::stats;

/// Number of batches used for batch-means standard errors.
pub const BATCHES: usize = 30;

/// Block length `m(γ) = ⌈2 ln 4 / (γμ)⌉` over which the coupled chains halve
/// the expected coupling cost.
pub fn m_gamma(gamma: f64, mu: f64) -> u64 {
    (2.0 * 4f64.ln() / (gamma * mu)).ceil() as u64
}

/// Default burn-in `10·m(γ)`.
pub fn default_burn_in(gamma: f64, mu: f64) -> u64 {
    10 * m_gamma(gamma, mu)
}

/// `c(θ,θ′) = ‖θ−θ′‖(‖θ−θ*‖ + ‖θ′−θ*‖ + 2√2·τ₂√γ/√μ)`.
pub fn cost_function_c(
    theta: &DVector<f64>,
    theta_prime: &DVector<f64>,
    theta_star: &DVector<f64>,
    gamma: f64,
    mu: f64,
    tau2: f64,
) -> f64 {
    let weight = (theta - theta_star).norm()
        + (theta_prime - theta_star).norm()
        + 2.0 * std::f64::consts::SQRT_2 * tau2 * (gamma / mu).sqrt();
    (theta - theta_prime).norm() * weight
}

/// Monte-Carlo mean of `c(θ_k, θ̃_k)` for two synchronously coupled chains.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayCurve {
    pub ks: Vec<u64>,
    pub values: Vec<f64>,
    pub std_errs: Vec<f64>,
    pub gamma: f64,
    pub m_gamma: u64,
}

impl DecayCurve {
    /// Value at iteration `k`, if recorded.
    pub fn at(&self, k: u64) -> Option<(f64, f64)> {
        self.ks
            .binary_search(&k)
            .ok()
            .map(|i| (self.values[i], self.std_errs[i]))
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "# m_gamma={}", self.m_gamma)?;
        writeln!(w, "# gamma={}", self.gamma)?;
        writeln!(w, "k,value,std_err")?;
        for ((k, v), s) in self.ks.iter().zip(&self.values).zip(&self.std_errs) {
            writeln!(w, "{k},{v},{s}")?;
        }
        Ok(())
    }
}

/// Run `replications` coupled pairs from `θ₀ᵃ` and `θ₀ᵇ` (pair `r` uses stream
/// index `r`) and average `c(θ_k, θ̃_k)` for `k = 0 … max_k`.
#[allow(clippy::too_many_arguments)]
pub fn coupling_contraction_curve(
    problem: &ProblemSpec,
    gamma: f64,
    theta0_a: &DVector<f64>,
    theta0_b: &DVector<f64>,
    max_k: u64,
    replications: usize,
    seed: u64,
) -> Result<DecayCurve> {
    Error::check_dim(problem.dim, theta0_a.len())?;
    Error::check_dim(problem.dim, theta0_b.len())?;
    if replications < 2 {
        return Err(Error::arg("need at least two replications"));
    }
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::arg("step size must be positive"));
    }
    let tau2 = problem.tau2();
    let mu = problem.mu;
    let star = &problem.theta_star;
    let per_rep: Vec<Vec<f64>> = (0..replications)
        .into_par_iter()
        .map(|r| -> Result<Vec<f64>> {
            let mut a = theta0_a.clone();
            let mut b = theta0_b.clone();
            let mut values = Vec::with_capacity(max_k as usize + 1);
            values.push(cost_function_c(&a, &b, star, gamma, mu, tau2));
            let key = StreamKey::new(seed, r as u32);
            let mut sa = NoiseStream::from_key(key);
            let mut sb = NoiseStream::from_key(key);
            for _ in 0..max_k {
                a = sgd_step(problem, &a, gamma, &mut sa)?;
                b = sgd_step(problem, &b, gamma, &mut sb)?;
                values.push(cost_function_c(&a, &b, star, gamma, mu, tau2));
            }
            Ok(values)
        })
        .collect::<Result<_>>()?;
    let ks: Vec<u64> = (0..=max_k).collect();
    let mut values = Vec::with_capacity(ks.len());
    let mut std_errs = Vec::with_capacity(ks.len());
    let mut column = vec![0.0; replications];
    for k in 0..ks.len() {
        for (r, rep) in per_rep.iter().enumerate() {
            column[r] = rep[k];
        }
        values.push(stats::mean(&column));
        std_errs.push(stats::std_err(&column));
    }
    Ok(DecayCurve {
        ks,
        values,
        std_errs,
        gamma,
        m_gamma: m_gamma(gamma, mu),
    })
}

/// Time-average estimate of a stationary moment with its batch-means error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryMoment {
    pub gamma: f64,
    pub p: u32,
    pub estimate: f64,
    pub std_err: f64,
    pub burn_in: u64,
    pub samples: u64,
}

fn check_stationary_args(
    problem: &ProblemSpec,
    gamma: f64,
    burn_in: u64,
    samples: u64,
) -> Result<()> {
    if gamma.is_nan() || gamma <= 0.0 {
        return Err(Error::arg("step size must be positive"));
    }
    let min_burn = default_burn_in(gamma, problem.mu);
    if burn_in < min_burn {
        return Err(Error::arg(format!(
            "burn_in {burn_in} is below 10*m(gamma) = {min_burn}"
        )));
    }
    if samples < BATCHES as u64 {
        return Err(Error::arg(format!("need at least {BATCHES} samples")));
    }
    Ok(())
}

/// Drive one chain from `θ*` through `burn_in` steps, then call `visit` on
/// each of the next `samples` iterates together with its batch index.
fn stationary_pass(
    problem: &ProblemSpec,
    gamma: f64,
    burn_in: u64,
    samples: u64,
    seed: u64,
    mut visit: impl FnMut(usize, &[f64]),
) -> Result<()> {
    let d = problem.dim;
    let mut stream = NoiseStream::new(seed, 0);
    let mut theta: Vec<f64> = problem.theta_star.iter().cloned().collect();
    let mut z = vec![0.0; problem.noise_dim()];
    let mut g = vec![0.0; d];
    let lengths = stats::batch_lengths(samples as usize, BATCHES);
    let mut step = |theta: &mut [f64], k: u64| -> Result<()> {
        stream.next_normals(&mut z);
        problem.stoch_gradient_into(theta, &z, &mut g);
        for i in 0..d {
            theta[i] -= gamma * g[i];
            if !theta[i].is_finite() {
                return Err(Error::Divergence {
                    chain: format!("gamma={gamma}"),
                    iteration: k,
                });
            }
        }
        Ok(())
    };
    let mut k = 0u64;
    for _ in 0..burn_in {
        k += 1;
        step(&mut theta, k)?;
    }
    for (b, &len) in lengths.iter().enumerate() {
        for _ in 0..len {
            k += 1;
            step(&mut theta, k)?;
            visit(b, &theta);
        }
    }
    Ok(())
}

/// Estimate `E_{π_γ}‖θ − θ*‖ᵖ` from one long chain started at `θ*`.
///
/// `burn_in` must be at least `10·m(γ)`; standard errors use 30 batch means.
pub fn stationary_moment_estimate(
    problem: &ProblemSpec,
    gamma: f64,
    p: u32,
    burn_in: u64,
    samples: u64,
    seed: u64,
) -> Result<StationaryMoment> {
    if p == 0 || !p.is_multiple_of(2) {
        return Err(Error::arg("moment order must be a positive even integer"));
    }
    check_stationary_args(problem, gamma, burn_in, samples)?;
    let star = problem.theta_star.as_slice();
    let lengths = stats::batch_lengths(samples as usize, BATCHES);
    let mut sums = vec![0.0; BATCHES];
    let half = (p / 2) as i32;
    stationary_pass(problem, gamma, burn_in, samples, seed, |b, theta| {
        let sq: f64 = theta.iter().zip(star).map(|(t, s)| (t - s) * (t - s)).sum();
        sums[b] += sq.powi(half);
    })?;
    let means: Vec<f64> = sums
        .iter()
        .zip(&lengths)
        .map(|(s, &l)| s / l as f64)
        .collect();
    let estimate = sums.iter().sum::<f64>() / samples as f64;
    let (_, std_err) = stats::batch_means(&means);
    Ok(StationaryMoment {
        gamma,
        p,
        estimate,
        std_err,
        burn_in,
        samples,
    })
}

/// Time-average estimate of `E_{π_γ}[(θ−θ*)(θ−θ*)ᵀ]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StationaryCovariance {
    pub gamma: f64,
    #[serde(serialize_with = "crate::json::matrix_rows")]
    pub matrix: DMatrix<f64>,
    #[serde(serialize_with = "crate::json::matrix_rows")]
    pub std_err: DMatrix<f64>,
    pub burn_in: u64,
    pub samples: u64,
}

pub fn stationary_covariance_estimate(
    problem: &ProblemSpec,
    gamma: f64,
    burn_in: u64,
    samples: u64,
    seed: u64,
) -> Result<StationaryCovariance> {
    check_stationary_args(problem, gamma, burn_in, samples)?;
    let d = problem.dim;
    let star = problem.theta_star.as_slice();
    let lengths = stats::batch_lengths(samples as usize, BATCHES);
    let mut sums = vec![DMatrix::<f64>::zeros(d, d); BATCHES];
    let mut u = vec![0.0; d];
    stationary_pass(problem, gamma, burn_in, samples, seed, |b, theta| {
        for i in 0..d {
            u[i] = theta[i] - star[i];
        }
        let s = &mut sums[b];
        for i in 0..d {
            for j in 0..d {
                s[(i, j)] += u[i] * u[j];
            }
        }
    })?;
    let total: DMatrix<f64> = sums.iter().fold(DMatrix::zeros(d, d), |acc, s| acc + s);
    let matrix = total / samples as f64;
    let mut std_err = DMatrix::zeros(d, d);
    let mut column = vec![0.0; BATCHES];
    for i in 0..d {
        for j in 0..d {
            for b in 0..BATCHES {
                column[b] = sums[b][(i, j)] / lengths[b] as f64;
            }
            std_err[(i, j)] = stats::std_err(&column);
        }
    }
    Ok(StationaryCovariance {
        gamma,
        matrix,
        std_err,
        burn_in,
        samples,
    })
}

pub fn write_stationary_csv<W: Write>(rows: &[StationaryMoment], mut w: W) -> io::Result<()> {
    writeln!(
        w,
        "gamma,p,estimate,std_err,estimate_over_gamma,burn_in,samples"
    )?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.gamma,
            r.p,
            r.estimate,
            r.std_err,
            r.estimate / r.gamma,
            r.burn_in,
            r.samples
        )?;
    }
    Ok(())
}

/// Least-squares fit of `log y = intercept + slope·log x`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub slope_std_err: f64,
    pub points: Vec<(f64, f64)>,
}

impl RateFit {
    pub fn predict(&self, x: f64) -> f64 {
        (self.intercept + self.slope * x.ln()).exp()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(
            w,
            "# slope={} intercept={} r_squared={}",
            self.slope, self.intercept, self.r_squared
        )?;
        writeln!(w, "x,y,fitted")?;
        for &(x, y) in &self.points {
            writeln!(w, "{x},{y},{}", self.predict(x))?;
        }
        Ok(())
    }
}

pub fn fit_rate_exponent(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::arg("rate fit needs at least three points"));
    }
    if points
        .iter()
        .any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite()))
    {
        return Err(Error::arg(
            "rate fit needs strictly positive finite coordinates",
        ));
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = points.len() as f64;
    let mx = stats::mean(&lx);
    let my = stats::mean(&ly);
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::arg("rate fit needs at least two distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| {
            let e = y - intercept - slope * x;
            e * e
        })
        .sum();
    let ss_tot: f64 = ly.iter().map(|y| (y - my) * (y - my)).sum();
    let r_squared = if ss_tot > 0.0 {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    } else {
        1.0
    };
    let slope_std_err = if n > 2.0 {
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(RateFit {
        slope,
        intercept,
        r_squared,
        slope_std_err,
        points: points.to_vec(),
    })
}

/// Outcome of [`decomposition_audit`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecompositionAudit {
    /// Largest absolute componentwise discrepancy.
    pub max_residual: f64,
    /// Largest absolute component among the reconstructed terms.
    pub term_scale: f64,
}

impl DecompositionAudit {
    pub fn relative(&self) -> f64 {
        if self.term_scale > 0.0 {
            self.max_residual / self.term_scale
        } else {
            self.max_residual
        }
    }
}

/// Rebuild `H*(θ̄ₙ − θ*)` from the run by summation by parts:
///
/// `(θ_{n+1} − θ_{2n+1})/(γn) − (1/n)Σ ε_{k+1}(θ_k) − (1/n)Σ η(θ_k)`, sums over
/// `k = n+1 … 2n`, where `ε_{k+1}(θ) = ∇F(θ, ξ_{k+1}) − ∇f(θ)`.
///
/// The noise draws are replayed from the run's stream key; `θ_{2n+1}` is
/// recomputed from the draw that follows the run.
pub fn decomposition_audit(problem: &ProblemSpec, run: &ChainRun) -> Result<DecompositionAudit> {
    let path = run
        .recorded_path
        .as_ref()
        .ok_or_else(|| Error::arg("run has no recorded path"))?;
    if path.stride != 1 {
        return Err(Error::arg("audit needs a stride-1 path"));
    }
    let n = run.n;
    if (path.iterates.len() as u64) < 2 * n + 1 {
        return Err(Error::arg("recorded path does not reach 2n"));
    }
    let d = problem.dim;
    let gamma = run.gamma;
    let h = problem.hessian_at_opt();
    let star = &problem.theta_star;
    let mut noise_sum = DVector::zeros(d);
    let mut eta_sum = DVector::zeros(d);
    let mut z = vec![0.0; problem.noise_dim()];
    let mut g = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut last_stoch = DVector::zeros(d);
    for k in n + 1..=2 * n {
        let theta = &path.iterates[k as usize];
        // θ_{k+1} is produced by draw number first_draw + k
        NoiseStream::at(run.stream_key, run.first_draw + k).peek_normals(&mut z);
        problem.stoch_gradient_into(theta.as_slice(), &z, &mut g);
        problem.gradient_into(theta.as_slice(), &mut grad);
        let lin = &h * (theta - star);
        for i in 0..d {
            noise_sum[i] += g[i] - grad[i];
            eta_sum[i] += grad[i] - lin[i];
        }
        if k == 2 * n {
            last_stoch = DVector::from_column_slice(&g);
        }
    }
    let theta_2n = &path.iterates[2 * n as usize];
    let theta_2n1 = theta_2n - &last_stoch * gamma;
    let nf = n as f64;
    let endpoint = (&path.iterates[n as usize + 1] - &theta_2n1) / (gamma * nf);
    let noise_avg = &noise_sum / nf;
    let eta_avg = &eta_sum / nf;
    let rhs = &endpoint - &noise_avg - &eta_avg;
    let lhs = &h * (&run.tail_average - star);
    let max_residual = (&lhs - &rhs).amax();
    let term_scale = [
        lhs.amax(),
        endpoint.amax(),
        noise_avg.amax(),
        eta_avg.amax(),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    Ok(DecompositionAudit {
        max_residual,
        term_scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn m_gamma_formula() {
        assert_eq!(m_gamma(0.1, 1.0), 28);
        assert_eq!(m_gamma(0.01, 1.0), 278);
    }

    #[test]
    fn cost_hand_value() {
        let v = |x: f64| DVector::from_element(1, x);
        let c = cost_function_c(&v(1.0), &v(0.0), &v(0.0), 0.25, 1.0, 1.0);
        assert_relative_eq!(c, 1.0 + 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(
            cost_function_c(&v(0.3), &v(0.3), &v(0.0), 0.25, 1.0, 1.0),
            0.0
        );
        assert_eq!(
            cost_function_c(&v(0.3), &v(-1.2), &v(0.1), 0.25, 2.0, 0.5),
            cost_function_c(&v(-1.2), &v(0.3), &v(0.1), 0.25, 2.0, 0.5)
        );
    }

    #[test]
    fn exact_power_law_fit() {
        let pts: Vec<(f64, f64)> = [10.0, 100.0, 1000.0]
            .iter()
            .map(|&x| (x, 1.0 / x))
            .collect();
        let fit = fit_rate_exponent(&pts).unwrap();
        assert_relative_eq!(fit.slope, -1.0, epsilon = 1e-12);
        assert_relative_eq!(fit.r_squared, 1.0, epsilon = 1e-12);
        let flat = fit_rate_exponent(&[(1.0, 2.0), (2.0, 2.0), (3.0, 2.0)]).unwrap();
        assert_eq!(flat.slope, 0.0);
    }

    #[test]
    fn fit_rejects_bad_points() {
        assert!(fit_rate_exponent(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]).is_err());
        assert!(fit_rate_exponent(&[(1.0, 1.0), (2.0, 1.0)]).is_err());
    }

    #[test]
    fn burn_in_guard() {
        let p = ProblemSpec::quadratic(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DMatrix::identity(1, 1),
        )
        .unwrap();
        assert!(stationary_moment_estimate(&p, 0.1, 2, 279, 1000, 0).is_err());
        assert!(stationary_moment_estimate(&p, 0.1, 2, 280, 1000, 0).is_ok());
        assert!(stationary_moment_estimate(&p, 0.1, 3, 280, 1000, 0).is_err());
    }
}

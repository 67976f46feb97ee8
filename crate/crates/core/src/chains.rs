//! Constant step-size SGD chains, tail averages and the coupled
//! Richardson-Romberg estimator.
//!
//! All chains driven by [`run_synchronous`] consume one noise draw per step,
//! shared by every chain in the group. A coupled RR run is the special case of
//! two chains with steps `γ` and `2γ`.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problems::ProblemSpec;
use crate::rng::{NoiseStream, StreamKey};

/// Every `stride`-th iterate of a run, starting with `θ₀`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RecordedPath {
    pub stride: usize,
    pub iterates: Vec<DVector<f64>>,
}

impl RecordedPath {
    /// `θ_k`, if it was recorded.
    pub fn get(&self, k: u64) -> Option<&DVector<f64>> {
        let stride = self.stride as u64;
        if !k.is_multiple_of(stride) {
            return None;
        }
        self.iterates.get((k / stride) as usize)
    }
}

/// One SGD run of `2n` steps.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainRun {
    pub gamma: f64,
    pub n: u64,
    pub theta0: DVector<f64>,
    /// `(1/n) Σ_{k=n+1}^{2n} θ_k`
    pub tail_average: DVector<f64>,
    pub theta_at_n_plus_1: DVector<f64>,
    pub theta_at_2n: DVector<f64>,
    pub recorded_path: Option<RecordedPath>,
    pub stream_key: StreamKey,
    /// Counter of the draw that produced `θ₁`.
    pub first_draw: u64,
}

/// Two runs with steps `γ` and `2γ` sharing every noise draw.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoupledRun {
    pub run_gamma: ChainRun,
    pub run_2gamma: ChainRun,
    pub rr_estimate: DVector<f64>,
}

/// A member of a group of chains driven by the same draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncChain {
    pub gamma: f64,
    /// Run the linearisation `φ ← φ − γ[H*(φ−θ*) + ∇F(θ*, ξ)]` instead of SGD.
    pub linearized: bool,
}

impl SyncChain {
    pub fn sgd(gamma: f64) -> Self {
        Self {
            gamma,
            linearized: false,
        }
    }

    pub fn linearized(gamma: f64) -> Self {
        Self {
            gamma,
            linearized: true,
        }
    }
}

/// Tail statistics of one member of a synchronous group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainSummary {
    pub tail_average: DVector<f64>,
    pub theta_at_n_plus_1: DVector<f64>,
    pub theta_at_2n: DVector<f64>,
}

fn check_theta(problem: &ProblemSpec, theta: &DVector<f64>) -> Result<()> {
    Error::check_dim(problem.dim, theta.len())?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("theta must be finite"));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::arg(format!(
            "step size must be positive, got {gamma}"
        )))
    }
}

fn warn_step(problem: &ProblemSpec, gamma: f64) {
    let bound = 1.0 / (2.0 * problem.smoothness);
    if gamma > bound {
        warn!("step size {gamma} exceeds 1/(2L) = {bound}; contraction is not guaranteed");
    }
}

/// One SGD step `θ − γ∇F(θ, ξ)`, consuming the next draw of `stream`.
pub fn sgd_step(
    problem: &ProblemSpec,
    theta: &DVector<f64>,
    gamma: f64,
    stream: &mut NoiseStream,
) -> Result<DVector<f64>> {
    check_gamma(gamma)?;
    let g = problem.stoch_gradient(theta, stream)?;
    let next = theta - g * gamma;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            chain: format!("gamma={gamma}"),
            iteration: stream.counter(),
        });
    }
    Ok(next)
}

struct DriveOutput {
    summaries: Vec<ChainSummary>,
    path: Option<RecordedPath>,
}

/// Divergence is reported as `(chain index, iterate index)`.
fn drive(
    problem: &ProblemSpec,
    theta0: &DVector<f64>,
    chains: &[SyncChain],
    n: u64,
    stream: &mut NoiseStream,
    record_stride: Option<usize>,
) -> std::result::Result<DriveOutput, (usize, u64)> {
    let d = problem.dim;
    let nc = chains.len();
    let theta_star = problem.theta_star.as_slice();
    let any_linear = chains.iter().any(|c| c.linearized);
    let h_rows: Vec<f64> = if any_linear {
        let h = problem.hessian_at_opt();
        (0..d * d).map(|i| h[(i / d, i % d)]).collect()
    } else {
        Vec::new()
    };

    let mut state: Vec<f64> = (0..nc).flat_map(|_| theta0.iter().cloned()).collect();
    let mut sums = vec![0.0; nc * d];
    let mut at_n1 = vec![0.0; nc * d];
    let mut z = vec![0.0; problem.noise_dim()];
    let mut g = vec![0.0; d];
    let mut g_star = vec![0.0; d];
    let mut path = record_stride.map(|stride| RecordedPath {
        stride,
        iterates: vec![theta0.clone()],
    });

    for k in 1..=2 * n {
        stream.next_normals(&mut z);
        if any_linear {
            problem.stoch_gradient_into(theta_star, &z, &mut g_star);
        }
        for (c, chain) in chains.iter().enumerate() {
            let theta = &mut state[c * d..(c + 1) * d];
            if chain.linearized {
                for i in 0..d {
                    let row = &h_rows[i * d..(i + 1) * d];
                    let mut acc = g_star[i];
                    for j in 0..d {
                        acc += row[j] * (theta[j] - theta_star[j]);
                    }
                    g[i] = acc;
                }
            } else {
                problem.stoch_gradient_into(theta, &z, &mut g);
            }
            let mut finite = true;
            for i in 0..d {
                theta[i] -= chain.gamma * g[i];
                finite &= theta[i].is_finite();
            }
            if !finite {
                return Err((c, k));
            }
            if k > n {
                let sum = &mut sums[c * d..(c + 1) * d];
                for i in 0..d {
                    sum[i] += theta[i] - theta_star[i];
                }
                if k == n + 1 {
                    at_n1[c * d..(c + 1) * d].copy_from_slice(theta);
                }
            }
        }
        if let Some(p) = path.as_mut() {
            if k % p.stride as u64 == 0 {
                p.iterates.push(DVector::from_column_slice(&state[..d]));
            }
        }
    }

    let nf = n as f64;
    let summaries = (0..nc)
        .map(|c| ChainSummary {
            tail_average: DVector::from_iterator(
                d,
                (0..d).map(|i| theta_star[i] + sums[c * d + i] / nf),
            ),
            theta_at_n_plus_1: DVector::from_column_slice(&at_n1[c * d..(c + 1) * d]),
            theta_at_2n: DVector::from_column_slice(&state[c * d..(c + 1) * d]),
        })
        .collect();
    Ok(DriveOutput { summaries, path })
}

fn chain_label(chain: &SyncChain) -> String {
    if chain.linearized {
        format!("linearized gamma={}", chain.gamma)
    } else {
        format!("gamma={}", chain.gamma)
    }
}

/// Run several chains from `θ₀` for `2n` steps each, all fed by the same
/// draws of `stream` (one draw per step).
pub fn run_synchronous(
    problem: &ProblemSpec,
    theta0: &DVector<f64>,
    chains: &[SyncChain],
    n: u64,
    stream: &mut NoiseStream,
) -> Result<Vec<ChainSummary>> {
    check_theta(problem, theta0)?;
    if n == 0 {
        return Err(Error::arg("n must be positive"));
    }
    for c in chains {
        check_gamma(c.gamma)?;
    }
    drive(problem, theta0, chains, n, stream, None)
        .map(|out| out.summaries)
        .map_err(|(c, k)| Error::Divergence {
            chain: chain_label(&chains[c]),
            iteration: k,
        })
}

/// `2n` SGD steps from `θ₀`; the tail average runs over `k = n+1 … 2n`.
///
/// With `record_stride = Some(s)` every `s`-th iterate (including `θ₀`) is kept.
pub fn run_tail_averaged(
    problem: &ProblemSpec,
    theta0: &DVector<f64>,
    gamma: f64,
    n: u64,
    stream: &mut NoiseStream,
    record_stride: Option<usize>,
) -> Result<ChainRun> {
    check_theta(problem, theta0)?;
    check_gamma(gamma)?;
    if n == 0 {
        return Err(Error::arg("n must be positive"));
    }
    if record_stride == Some(0) {
        return Err(Error::arg("record stride must be positive"));
    }
    warn_step(problem, gamma);
    let first_draw = stream.counter();
    let chains = [SyncChain::sgd(gamma)];
    let out = drive(problem, theta0, &chains, n, stream, record_stride).map_err(|(_, k)| {
        Error::Divergence {
            chain: format!("gamma={gamma}"),
            iteration: k,
        }
    })?;
    let s = out.summaries.into_iter().next().expect("one chain");
    Ok(ChainRun {
        gamma,
        n,
        theta0: theta0.clone(),
        tail_average: s.tail_average,
        theta_at_n_plus_1: s.theta_at_n_plus_1,
        theta_at_2n: s.theta_at_2n,
        recorded_path: out.path,
        stream_key: stream.key(),
        first_draw,
    })
}

/// The `γ` and `2γ` chains from `θ₀`, interleaved over the draws of
/// `stream_key` starting at draw 0.
pub fn run_coupled_rr(
    problem: &ProblemSpec,
    theta0: &DVector<f64>,
    gamma: f64,
    n: u64,
    stream_key: StreamKey,
) -> Result<CoupledRun> {
    check_theta(problem, theta0)?;
    check_gamma(gamma)?;
    if n == 0 {
        return Err(Error::arg("n must be positive"));
    }
    warn_step(problem, 2.0 * gamma);
    let mut stream = NoiseStream::from_key(stream_key);
    let chains = [SyncChain::sgd(gamma), SyncChain::sgd(2.0 * gamma)];
    let out = drive(problem, theta0, &chains, n, &mut stream, None).map_err(|(c, k)| {
        Error::Divergence {
            chain: if c == 0 { "gamma" } else { "2gamma" }.to_string(),
            iteration: k,
        }
    })?;
    let mut it = out.summaries.into_iter();
    let (a, b) = (
        it.next().expect("gamma chain"),
        it.next().expect("2gamma chain"),
    );
    let to_run = |s: ChainSummary, step: f64| ChainRun {
        gamma: step,
        n,
        theta0: theta0.clone(),
        tail_average: s.tail_average,
        theta_at_n_plus_1: s.theta_at_n_plus_1,
        theta_at_2n: s.theta_at_2n,
        recorded_path: None,
        stream_key,
        first_draw: 0,
    };
    let run_gamma = to_run(a, gamma);
    let run_2gamma = to_run(b, 2.0 * gamma);
    let rr_estimate = rr_combine(&run_gamma.tail_average, &run_2gamma.tail_average)?;
    Ok(CoupledRun {
        run_gamma,
        run_2gamma,
        rr_estimate,
    })
}

/// `2·avg_gamma − avg_2gamma`.
pub fn rr_combine(avg_gamma: &DVector<f64>, avg_2gamma: &DVector<f64>) -> Result<DVector<f64>> {
    Error::check_dim(avg_gamma.len(), avg_2gamma.len())?;
    Ok(avg_gamma * 2.0 - avg_2gamma)
}

/// Exact expectation of the tail average of a linearized chain:
/// `θ* + (1/n) Σ_{k=n+1}^{2n} (I − γH*)^k (θ₀ − θ*)`.
pub fn linearized_tail_mean(
    problem: &ProblemSpec,
    theta0: &DVector<f64>,
    gamma: f64,
    n: u64,
) -> Result<DVector<f64>> {
    check_theta(problem, theta0)?;
    check_gamma(gamma)?;
    if n == 0 {
        return Err(Error::arg("n must be positive"));
    }
    let eig = SymmetricEigen::new(problem.hessian_at_opt());
    let v = &eig.eigenvectors;
    let coords = v.transpose() * (theta0 - &problem.theta_star);
    let nf = n as f64;
    let weights = DVector::from_iterator(
        problem.dim,
        eig.eigenvalues.iter().map(|&lambda| {
            let a = gamma * lambda;
            let r = 1.0 - a;
            // Σ_{k=n+1}^{2n} r^k = r^{n+1}(1 − r^n)/(1 − r)
            let rn = r.powf(nf);
            if a.abs() < 1e-300 {
                nf
            } else {
                r * rn * (1.0 - rn) / a
            }
        }),
    );
    let scaled = coords.component_mul(&weights) / nf;
    Ok(&problem.theta_star + v * scaled)
}

/// `(I − γH*)^k` applied to `v`.
pub fn linear_propagate(h: &DMatrix<f64>, gamma: f64, k: u64, v: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(h.clone());
    let q = &eig.eigenvectors;
    let coords = q.transpose() * v;
    let kf = k as f64;
    let scaled = DVector::from_iterator(
        v.len(),
        coords
            .iter()
            .zip(eig.eigenvalues.iter())
            .map(|(c, &l)| c * (1.0 - gamma * l).powf(kf)),
    );
    q * scaled
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn quad_1d(h: f64, sigma2: f64) -> ProblemSpec {
        ProblemSpec::quadratic(
            DMatrix::from_element(1, 1, h),
            DVector::zeros(1),
            DMatrix::from_element(1, 1, sigma2),
        )
        .unwrap()
    }

    #[test]
    fn zero_noise_step() {
        let p = quad_1d(1.0, 0.0);
        let mut s = NoiseStream::new(0, 0);
        let next = sgd_step(&p, &DVector::from_element(1, 1.0), 0.1, &mut s).unwrap();
        assert_relative_eq!(next[0], 0.9, epsilon = 1e-15);
        assert_eq!(s.counter(), 1);
    }

    #[test]
    fn zero_noise_tail_average() {
        let p = quad_1d(1.0, 0.0);
        let mut s = NoiseStream::new(0, 0);
        let run =
            run_tail_averaged(&p, &DVector::from_element(1, 1.0), 0.5, 2, &mut s, Some(1)).unwrap();
        assert_eq!(run.tail_average[0], 0.09375);
        assert_eq!(run.theta_at_n_plus_1[0], 0.125);
        assert_eq!(run.theta_at_2n[0], 0.0625);
        assert_eq!(s.counter(), 4);
        let path = run.recorded_path.unwrap();
        let values: Vec<f64> = path.iterates.iter().map(|v| v[0]).collect();
        assert_eq!(values, vec![1.0, 0.5, 0.25, 0.125, 0.0625]);
    }

    #[test]
    fn zero_noise_coupled() {
        let p = quad_1d(1.0, 0.0);
        let run = run_coupled_rr(
            &p,
            &DVector::from_element(1, 1.0),
            0.5,
            2,
            StreamKey::new(1, 0),
        )
        .unwrap();
        assert_eq!(run.run_2gamma.tail_average[0], 0.0);
        assert_eq!(run.rr_estimate[0], 0.1875);
    }

    #[test]
    fn rr_combine_arithmetic() {
        let a = DVector::from_vec(vec![1.0, 0.0]);
        let b = DVector::from_vec(vec![0.0, 1.0]);
        assert_eq!(rr_combine(&a, &b).unwrap().as_slice(), &[2.0, -1.0]);
        assert_eq!(rr_combine(&a, &a).unwrap(), a);
        assert!(rr_combine(&a, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn divergence_names_iterate() {
        let p = quad_1d(1.0, 0.0);
        let mut s = NoiseStream::new(0, 0);
        let err = run_tail_averaged(&p, &DVector::from_element(1, 1.0), 1e200, 10, &mut s, None)
            .unwrap_err();
        assert!(
            matches!(err, Error::Divergence { iteration: 2, .. }),
            "{err:?}"
        );
        // |1 − γ| < 1 < |1 − 2γ|: only the 2γ chain blows up
        let err = run_coupled_rr(
            &p,
            &DVector::from_element(1, 1.0),
            1.9,
            1000,
            StreamKey::new(0, 0),
        )
        .unwrap_err();
        assert!(
            matches!(err, Error::Divergence { ref chain, .. } if chain == "2gamma"),
            "{err:?}"
        );
    }

    #[test]
    fn linearized_mean_matches_zero_noise_run() {
        let h = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let p = ProblemSpec::quadratic(h, DVector::from_vec(vec![1.0, -1.0]), DMatrix::zeros(2, 2))
            .unwrap();
        let theta0 = DVector::from_vec(vec![0.0, 0.5]);
        let mut s = NoiseStream::new(3, 0);
        let out = run_synchronous(&p, &theta0, &[SyncChain::linearized(0.1)], 7, &mut s).unwrap();
        let expected = linearized_tail_mean(&p, &theta0, 0.1, 7).unwrap();
        assert_relative_eq!(out[0].tail_average, expected, epsilon = 1e-13);
    }
}

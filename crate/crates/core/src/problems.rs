//! Strongly convex test problems with stochastic gradient oracles.
//!
//! Three families are provided:
//!
//! * [`ProblemKind::Quadratic`]: `f(θ) = ½(θ−θ*)ᵀH(θ−θ*)` with additive noise.
//!   The stationary mean of constant-step SGD is exactly `θ*`.
//! * [`ProblemKind::LogCoshPerturbedQuadratic`]:
//!   `f(θ) = ½(θ−θ₀)ᵀH₀(θ−θ₀) + ε Σᵢ log cosh(θᵢ−cᵢ)`, with bounded third and
//!   fourth derivatives and a nonzero first-order bias. `θ*` is found by a
//!   damped Newton iteration when the problem is built.
//! * [`ProblemKind::LinearRegression`]: Gaussian design `a ~ N(0, M)`, labels
//!   `b = aᵀθ* + e`, oracle `∇F(θ,(a,b)) = a(aᵀθ − b)` (state-dependent noise).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{NoiseStream, StreamKey};

const SYMMETRY_TOL: f64 = 1e-10;
const NEWTON_GRAD_TOL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemKind {
    Quadratic {
        #[serde(serialize_with = "crate::json::matrix_rows")]
        hessian: DMatrix<f64>,
    },
    LogCoshPerturbedQuadratic {
        #[serde(serialize_with = "crate::json::matrix_rows")]
        base_hessian: DMatrix<f64>,
        #[serde(serialize_with = "crate::json::vector")]
        base_center: DVector<f64>,
        perturbation: f64,
        #[serde(serialize_with = "crate::json::vector")]
        perturbation_center: DVector<f64>,
    },
    LinearRegression {
        #[serde(serialize_with = "crate::json::matrix_rows")]
        covariate_cov: DMatrix<f64>,
    },
}

impl ProblemKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProblemKind::Quadratic { .. } => "quadratic",
            ProblemKind::LogCoshPerturbedQuadratic { .. } => "log_cosh",
            ProblemKind::LinearRegression { .. } => "linear_regression",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum NoiseModel {
    /// `∇F(θ, ξ) = ∇f(θ) + ξ` with `ξ ~ N(0, cov)`.
    Additive {
        #[serde(serialize_with = "crate::json::matrix_rows")]
        cov: DMatrix<f64>,
    },
    /// Regression sampling: `a ~ N(0, covariate_cov)`, `e ~ N(0, label_variance)`.
    Regression {
        #[serde(serialize_with = "crate::json::matrix_rows")]
        covariate_cov: DMatrix<f64>,
        label_variance: f64,
    },
}

/// Third-order symmetric tensor stored densely, index `(i, j, l)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tensor3 {
    dim: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim * dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, l: usize) -> f64 {
        self.data[(i * self.dim + j) * self.dim + l]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, l: usize, v: f64) {
        let d = self.dim;
        self.data[(i * d + j) * d + l] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `(T M)_l = Σ_{i,j} M_ij T_ijl`.
    pub fn contract(&self, m: &DMatrix<f64>) -> Result<DVector<f64>> {
        Error::check_dim(self.dim, m.nrows())?;
        Error::check_dim(self.dim, m.ncols())?;
        let d = self.dim;
        let mut out = DVector::zeros(d);
        for i in 0..d {
            for j in 0..d {
                let mij = m[(i, j)];
                if mij == 0.0 {
                    continue;
                }
                for l in 0..d {
                    out[l] += mij * self.get(i, j, l);
                }
            }
        }
        Ok(out)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let d = self.dim;
        for i in 0..d {
            for j in 0..d {
                for l in 0..d {
                    let v = self.get(i, j, l);
                    for w in [self.get(j, i, l), self.get(i, l, j), self.get(l, j, i)] {
                        if (v - w).abs() > tol * (1.0 + v.abs()) {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// Noise covariance at the optimum, with a standard error when estimated.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseCovEstimate {
    #[serde(serialize_with = "crate::json::matrix_rows")]
    pub matrix: DMatrix<f64>,
    #[serde(skip)]
    pub std_err: Option<DMatrix<f64>>,
    pub closed_form: bool,
}

/// A strongly convex problem together with its stochastic gradient oracle.
///
/// Immutable after construction; cheap to share across threads.
#[derive(Debug, Clone, Serialize)]
pub struct ProblemSpec {
    pub dim: usize,
    #[serde(serialize_with = "crate::json::vector")]
    pub theta_star: DVector<f64>,
    pub mu: f64,
    pub smoothness: f64,
    pub kind: ProblemKind,
    pub noise: NoiseModel,
    #[serde(skip)]
    quad_rows: Vec<f64>,
    #[serde(skip)]
    quad_center: Vec<f64>,
    #[serde(skip)]
    noise_factor: Vec<f64>,
    #[serde(skip)]
    noise_dim: usize,
}

fn check_symmetric(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() {
        return Err(Error::arg(format!("{name} must be square")));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::arg(format!("{name} must be symmetric")));
            }
        }
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg(format!("{name} has non-finite entries")));
    }
    Ok(())
}

fn extreme_eigenvalues(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let lo = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

/// Row-major `F` with `F Fᵀ = m` for a symmetric PSD `m`.
fn psd_factor(name: &str, m: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_symmetric(name, m)?;
    let d = m.nrows();
    let eig = SymmetricEigen::new(m.clone());
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let mut f = vec![0.0; d * d];
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -1e-12 * scale {
            return Err(Error::arg(format!("{name} must be positive semidefinite")));
        }
        let s = lambda.max(0.0).sqrt();
        for i in 0..d {
            f[i * d + k] = eig.eigenvectors[(i, k)] * s;
        }
    }
    Ok(f)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn check_vec(name: &str, v: &DVector<f64>, dim: usize) -> Result<()> {
    Error::check_dim(dim, v.len())?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::arg(format!("{name} has non-finite entries")));
    }
    Ok(())
}

#[inline]
fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl ProblemSpec {
    /// `f(θ) = ½(θ−θ*)ᵀH(θ−θ*)` with additive Gaussian noise of covariance `noise_cov`.
    pub fn quadratic(
        hessian: DMatrix<f64>,
        theta_star: DVector<f64>,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let d = hessian.nrows();
        if d == 0 {
            return Err(Error::arg("dimension must be positive"));
        }
        check_symmetric("hessian", &hessian)?;
        check_vec("theta_star", &theta_star, d)?;
        Error::check_dim(d, noise_cov.nrows())?;
        let (lo, hi) = extreme_eigenvalues(&hessian);
        if lo <= 0.0 {
            return Err(Error::arg("hessian must be positive definite"));
        }
        let noise_factor = psd_factor("noise_cov", &noise_cov)?;
        Ok(Self {
            dim: d,
            quad_rows: row_major(&hessian),
            quad_center: theta_star.iter().cloned().collect(),
            theta_star,
            mu: lo,
            smoothness: hi,
            kind: ProblemKind::Quadratic { hessian },
            noise: NoiseModel::Additive { cov: noise_cov },
            noise_factor,
            noise_dim: d,
        })
    }

    /// `f(θ) = ½(θ−θ₀)ᵀH₀(θ−θ₀) + ε Σᵢ log cosh(θᵢ − cᵢ)` with additive noise.
    pub fn log_cosh(
        base_hessian: DMatrix<f64>,
        base_center: DVector<f64>,
        perturbation: f64,
        perturbation_center: DVector<f64>,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self> {
        let d = base_hessian.nrows();
        if d == 0 {
            return Err(Error::arg("dimension must be positive"));
        }
        check_symmetric("base_hessian", &base_hessian)?;
        check_vec("base_center", &base_center, d)?;
        check_vec("perturbation_center", &perturbation_center, d)?;
        Error::check_dim(d, noise_cov.nrows())?;
        if !perturbation.is_finite() {
            return Err(Error::arg("perturbation must be finite"));
        }
        let (lo, hi) = extreme_eigenvalues(&base_hessian);
        // log cosh'' = sech² ∈ (0, 1]
        let mu = lo - (-perturbation).max(0.0);
        if mu <= 0.0 {
            return Err(Error::arg(
                "base_hessian does not dominate the perturbation; objective is not strongly convex",
            ));
        }
        let eps = perturbation.abs();
        let l2 = hi + perturbation.max(0.0);
        let l3 = 4.0 / (3.0 * 3f64.sqrt()) * eps;
        let l4 = 2.0 * eps;
        let noise_factor = psd_factor("noise_cov", &noise_cov)?;
        let mut spec = Self {
            dim: d,
            quad_rows: row_major(&base_hessian),
            quad_center: base_center.iter().cloned().collect(),
            theta_star: base_center.clone(),
            mu,
            smoothness: l2.max(l3).max(l4),
            kind: ProblemKind::LogCoshPerturbedQuadratic {
                base_hessian,
                base_center,
                perturbation,
                perturbation_center,
            },
            noise: NoiseModel::Additive { cov: noise_cov },
            noise_factor,
            noise_dim: d,
        };
        spec.theta_star = spec.newton_minimize()?;
        Ok(spec)
    }

    /// Least squares with Gaussian design `a ~ N(0, covariate_cov)` and label
    /// noise of variance `label_variance`.
    pub fn linear_regression(
        covariate_cov: DMatrix<f64>,
        theta_star: DVector<f64>,
        label_variance: f64,
    ) -> Result<Self> {
        let d = covariate_cov.nrows();
        if d == 0 {
            return Err(Error::arg("dimension must be positive"));
        }
        check_symmetric("covariate_cov", &covariate_cov)?;
        check_vec("theta_star", &theta_star, d)?;
        if !(label_variance >= 0.0 && label_variance.is_finite()) {
            return Err(Error::arg("label_variance must be non-negative"));
        }
        let (lo, hi) = extreme_eigenvalues(&covariate_cov);
        if lo <= 0.0 {
            return Err(Error::arg("covariate_cov must be positive definite"));
        }
        // E[a aᵀ a aᵀ] = 2M² + tr(M) M ≼ (2λmax + tr M) M gives the co-coercivity constant.
        let l1 = 2.0 * hi + covariate_cov.trace();
        let mut noise_factor = psd_factor("covariate_cov", &covariate_cov)?;
        // the label noise is carried as an extra row/column of the factor
        let mut ext = vec![0.0; (d + 1) * (d + 1)];
        for i in 0..d {
            for j in 0..d {
                ext[i * (d + 1) + j] = noise_factor[i * d + j];
            }
        }
        ext[d * (d + 1) + d] = label_variance.sqrt();
        noise_factor = ext;
        Ok(Self {
            dim: d,
            quad_rows: row_major(&covariate_cov),
            quad_center: theta_star.iter().cloned().collect(),
            theta_star,
            mu: lo,
            smoothness: l1.max(hi),
            kind: ProblemKind::LinearRegression {
                covariate_cov: covariate_cov.clone(),
            },
            noise: NoiseModel::Regression {
                covariate_cov,
                label_variance,
            },
            noise_factor,
            noise_dim: d + 1,
        })
    }

    /// Number of standard normals consumed by one oracle call.
    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    /// Objective value.
    pub fn value(&self, theta: &DVector<f64>) -> Result<f64> {
        check_vec("theta", theta, self.dim)?;
        let d = self.dim;
        let mut quad = 0.0;
        for i in 0..d {
            let ui = theta[i] - self.quad_center[i];
            for j in 0..d {
                quad += ui * self.quad_rows[i * d + j] * (theta[j] - self.quad_center[j]);
            }
        }
        let mut v = 0.5 * quad;
        match &self.kind {
            ProblemKind::LogCoshPerturbedQuadratic {
                perturbation,
                perturbation_center,
                ..
            } => {
                for i in 0..d {
                    v += perturbation * log_cosh(theta[i] - perturbation_center[i]);
                }
            }
            ProblemKind::LinearRegression { .. } => {
                if let NoiseModel::Regression { label_variance, .. } = &self.noise {
                    v += 0.5 * label_variance;
                }
            }
            ProblemKind::Quadratic { .. } => {}
        }
        Ok(v)
    }

    /// `∇f(θ)` written into `out`. No dimension checks.
    #[inline]
    pub fn gradient_into(&self, theta: &[f64], out: &mut [f64]) {
        let d = self.dim;
        if d == 1 {
            out[0] = self.quad_rows[0] * (theta[0] - self.quad_center[0]);
        } else {
            for (i, o) in out.iter_mut().enumerate().take(d) {
                let row = &self.quad_rows[i * d..(i + 1) * d];
                let mut acc = 0.0;
                for j in 0..d {
                    acc += row[j] * (theta[j] - self.quad_center[j]);
                }
                *o = acc;
            }
        }
        if let ProblemKind::LogCoshPerturbedQuadratic {
            perturbation,
            perturbation_center,
            ..
        } = &self.kind
        {
            for i in 0..d {
                out[i] += perturbation * (theta[i] - perturbation_center[i]).tanh();
            }
        }
    }

    /// `∇F(θ, ξ)` where `ξ` is built from the standard normals `z`
    /// (length [`noise_dim`](Self::noise_dim)). No dimension checks.
    #[inline]
    pub fn stoch_gradient_into(&self, theta: &[f64], z: &[f64], out: &mut [f64]) {
        let d = self.dim;
        match self.noise {
            NoiseModel::Additive { .. } => {
                self.gradient_into(theta, out);
                if d == 1 {
                    out[0] += self.noise_factor[0] * z[0];
                } else {
                    for (i, o) in out.iter_mut().enumerate().take(d) {
                        let row = &self.noise_factor[i * d..(i + 1) * d];
                        let mut acc = 0.0;
                        for j in 0..d {
                            acc += row[j] * z[j];
                        }
                        *o += acc;
                    }
                }
            }
            NoiseModel::Regression { .. } => {
                let m = d + 1;
                // a = F z[..d], e = σ z[d]; ∇F = a (aᵀ(θ−θ*) − e)
                let mut residual = 0.0;
                for (i, o) in out.iter_mut().enumerate().take(d) {
                    let row = &self.noise_factor[i * m..i * m + d];
                    let mut ai = 0.0;
                    for j in 0..d {
                        ai += row[j] * z[j];
                    }
                    *o = ai;
                    residual += ai * (theta[i] - self.theta_star[i]);
                }
                residual -= self.noise_factor[d * m + d] * z[d];
                for o in out.iter_mut().take(d) {
                    *o *= residual;
                }
            }
        }
    }

    pub fn gradient(&self, theta: &DVector<f64>) -> Result<DVector<f64>> {
        check_vec("theta", theta, self.dim)?;
        let mut out = DVector::zeros(self.dim);
        self.gradient_into(theta.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// `∇F(θ, ξ)` with `ξ` the next draw of `stream`.
    pub fn stoch_gradient(
        &self,
        theta: &DVector<f64>,
        stream: &mut NoiseStream,
    ) -> Result<DVector<f64>> {
        check_vec("theta", theta, self.dim)?;
        if stream.counter() == u64::MAX {
            return Err(Error::Stream("stream counter exhausted".into()));
        }
        let mut z = vec![0.0; self.noise_dim];
        stream.next_normals(&mut z);
        let mut out = DVector::zeros(self.dim);
        self.stoch_gradient_into(theta.as_slice(), &z, out.as_mut_slice());
        Ok(out)
    }

    /// `∇F(θ, ξ)` for explicitly supplied standard normals.
    pub fn stoch_gradient_with_normals(
        &self,
        theta: &DVector<f64>,
        z: &[f64],
    ) -> Result<DVector<f64>> {
        check_vec("theta", theta, self.dim)?;
        Error::check_dim(self.noise_dim, z.len())?;
        let mut out = DVector::zeros(self.dim);
        self.stoch_gradient_into(theta.as_slice(), z, out.as_mut_slice());
        Ok(out)
    }

    /// `∇²f(θ)`.
    pub fn hessian(&self, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
        check_vec("theta", theta, self.dim)?;
        let d = self.dim;
        let mut h = DMatrix::from_row_slice(d, d, &self.quad_rows);
        if let ProblemKind::LogCoshPerturbedQuadratic {
            perturbation,
            perturbation_center,
            ..
        } = &self.kind
        {
            for i in 0..d {
                let t = (theta[i] - perturbation_center[i]).tanh();
                h[(i, i)] += perturbation * (1.0 - t * t);
            }
        }
        Ok(h)
    }

    /// `H* = ∇²f(θ*)`.
    pub fn hessian_at_opt(&self) -> DMatrix<f64> {
        self.hessian(&self.theta_star)
            .expect("theta_star has the problem dimension")
    }

    /// `∇³f(θ)`.
    pub fn third_derivative(&self, theta: &DVector<f64>) -> Result<Tensor3> {
        check_vec("theta", theta, self.dim)?;
        let mut t3 = Tensor3::zeros(self.dim);
        if let ProblemKind::LogCoshPerturbedQuadratic {
            perturbation,
            perturbation_center,
            ..
        } = &self.kind
        {
            for i in 0..self.dim {
                let t = (theta[i] - perturbation_center[i]).tanh();
                t3.set(i, i, i, -2.0 * perturbation * (1.0 - t * t) * t);
            }
        }
        Ok(t3)
    }

    pub fn third_derivative_at_opt(&self) -> Result<Tensor3> {
        self.third_derivative(&self.theta_star)
    }

    /// Uniform bound on the operator norm of `∇⁴f`.
    pub fn fourth_derivative_bound(&self) -> f64 {
        match &self.kind {
            ProblemKind::LogCoshPerturbedQuadratic { perturbation, .. } => 2.0 * perturbation.abs(),
            _ => 0.0,
        }
    }

    /// Closed-form `Σ_ε* = E[∇F(θ*, ξ)⊗²]`.
    pub fn noise_cov_closed_form(&self) -> DMatrix<f64> {
        match &self.noise {
            NoiseModel::Additive { cov } => cov.clone(),
            // E[a aᵀ e²] = σ² M
            NoiseModel::Regression {
                covariate_cov,
                label_variance,
            } => covariate_cov * *label_variance,
        }
    }

    /// `Σ_ε*`. Every built-in noise model has a closed form, so
    /// `mc_samples` is only consulted by [`estimate_noise_cov`].
    pub fn noise_cov_at_opt(&self, mc_samples: usize) -> NoiseCovEstimate {
        let _ = mc_samples;
        NoiseCovEstimate {
            matrix: self.noise_cov_closed_form(),
            std_err: None,
            closed_form: true,
        }
    }

    /// `τ₂ = E^{1/2}‖∇F(θ*, ξ)‖²`.
    pub fn tau2(&self) -> f64 {
        self.noise_cov_closed_form().trace().max(0.0).sqrt()
    }

    fn newton_minimize(&self) -> Result<DVector<f64>> {
        let mut theta = self.theta_star.clone();
        let mut g = self.gradient(&theta)?;
        for _ in 0..200 {
            let gnorm = g.norm();
            if gnorm <= NEWTON_GRAD_TOL {
                return Ok(theta);
            }
            let h = self.hessian(&theta)?;
            let step = h
                .cholesky()
                .ok_or_else(|| Error::arg("Hessian lost positive definiteness"))?
                .solve(&g);
            let mut t = 1.0;
            let mut accepted = false;
            while t > 1e-12 {
                let cand = &theta - &step * t;
                let gc = self.gradient(&cand)?;
                if gc.norm() < gnorm {
                    theta = cand;
                    g = gc;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        // Roundoff floor: accept if the residual is at the precision of the gradient terms.
        let scale = self.quad_rows.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
            * (1.0 + theta.amax())
            + self.fourth_derivative_bound();
        if g.norm() <= NEWTON_GRAD_TOL * scale.max(1.0) {
            Ok(theta)
        } else {
            Err(Error::arg(format!(
                "Newton iteration for the optimum stalled at gradient norm {:e}",
                g.norm()
            )))
        }
    }
}

/// Monte-Carlo estimate of `Σ_ε*` with entrywise standard errors.
pub fn estimate_noise_cov(
    problem: &ProblemSpec,
    samples: usize,
    key: StreamKey,
) -> Result<NoiseCovEstimate> {
    if samples < 2 {
        return Err(Error::arg("need at least two samples"));
    }
    let d = problem.dim;
    let mut stream = NoiseStream::from_key(key);
    let mut z = vec![0.0; problem.noise_dim()];
    let mut g = vec![0.0; d];
    let mut sum = DMatrix::<f64>::zeros(d, d);
    let mut sum_sq = DMatrix::<f64>::zeros(d, d);
    let theta = problem.theta_star.as_slice();
    for _ in 0..samples {
        stream.next_normals(&mut z);
        problem.stoch_gradient_into(theta, &z, &mut g);
        for i in 0..d {
            for j in 0..d {
                let v = g[i] * g[j];
                sum[(i, j)] += v;
                sum_sq[(i, j)] += v * v;
            }
        }
    }
    let n = samples as f64;
    let mean = &sum / n;
    let mut se = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let var = (sum_sq[(i, j)] / n - mean[(i, j)] * mean[(i, j)]).max(0.0) * n / (n - 1.0);
            se[(i, j)] = (var / n).sqrt();
        }
    }
    Ok(NoiseCovEstimate {
        matrix: mean,
        std_err: Some(se),
        closed_form: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn one(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn quadratic_gradient_identity_hessian() {
        let p = ProblemSpec::quadratic(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let g = p.gradient(&DVector::from_vec(vec![1.0, 2.0])).unwrap();
        assert_eq!(g.as_slice(), &[1.0, 2.0]);
        assert_eq!(p.gradient(&p.theta_star).unwrap().norm(), 0.0);
    }

    #[test]
    fn log_cosh_gradient_hand_value() {
        let p = ProblemSpec::log_cosh(one(1.0), scalar(0.0), 0.5, scalar(0.0), one(1.0)).unwrap();
        assert_eq!(p.theta_star[0], 0.0);
        let g = p.gradient(&scalar(0.3)).unwrap();
        assert_relative_eq!(g[0], 0.3 + 0.5 * 0.3_f64.tanh(), epsilon = 1e-15);
        assert_relative_eq!(p.hessian_at_opt()[(0, 0)], 1.5, epsilon = 1e-15);
        assert!(p.third_derivative_at_opt().unwrap().is_zero());
    }

    #[test]
    fn log_cosh_shifted_center_third_derivative() {
        let (eps, c) = (0.5, 0.5);
        let p = ProblemSpec::log_cosh(one(1.0), scalar(0.0), eps, scalar(c), one(1.0)).unwrap();
        // Independent root-find by bisection of θ + ε tanh(θ − c) = 0.
        let (mut lo, mut hi) = (-1.0_f64, 1.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid + eps * (mid - c).tanh() > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let root = 0.5 * (lo + hi);
        assert_relative_eq!(p.theta_star[0], root, epsilon = 1e-13);
        let u: f64 = root - c;
        let sech2 = 1.0 / u.cosh().powi(2);
        let expected = -2.0 * eps * sech2 * u.tanh();
        let t3 = p.third_derivative_at_opt().unwrap();
        assert_relative_eq!(t3.get(0, 0, 0), expected, epsilon = 1e-13);
        assert!(p.gradient(&p.theta_star).unwrap().norm() <= 1e-13);
    }

    #[test]
    fn regression_oracle_at_optimum() {
        let theta_star = DVector::from_vec(vec![1.0, -2.0]);
        let p = ProblemSpec::linear_regression(DMatrix::identity(2, 2), theta_star.clone(), 0.25)
            .unwrap();
        // z = (a, e/σ) with identity covariate factor up to rotation: recover a from the factor.
        let z = [0.3, -0.7, 1.2];
        let g = p.stoch_gradient_with_normals(&theta_star, &z).unwrap();
        let g_theta = p
            .stoch_gradient_with_normals(&(&theta_star + DVector::from_vec(vec![0.1, 0.0])), &z)
            .unwrap();
        // a(aᵀθ − b) with b = aᵀθ* + e: at θ* it is −a e, so g is parallel to a.
        let e = 0.5 * 1.2;
        let a = -&g / e;
        let expected = &a * (a[0] * 0.1 - e);
        assert_relative_eq!(g_theta, expected, epsilon = 1e-14);
        assert_relative_eq!(
            a.norm(),
            (0.3_f64.powi(2) + 0.7_f64.powi(2)).sqrt(),
            epsilon = 1e-14
        );
    }

    #[test]
    fn forced_zero_noise_returns_gradient() {
        let p = ProblemSpec::log_cosh(
            DMatrix::identity(2, 2) * 2.0,
            DVector::from_vec(vec![0.5, -0.5]),
            0.7,
            DVector::from_vec(vec![0.1, 0.2]),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let theta = DVector::from_vec(vec![0.4, 1.1]);
        let g = p.gradient(&theta).unwrap();
        let gz = p.stoch_gradient_with_normals(&theta, &[0.0, 0.0]).unwrap();
        assert_eq!(g, gz);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let p = ProblemSpec::quadratic(
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            DMatrix::zeros(2, 2),
        )
        .unwrap();
        assert_eq!(
            p.gradient(&DVector::zeros(3)),
            Err(Error::Dimension {
                expected: 2,
                got: 3
            })
        );
    }

    #[test]
    fn rejects_non_convex_inputs() {
        assert!(ProblemSpec::quadratic(one(-1.0), scalar(0.0), one(1.0)).is_err());
        assert!(ProblemSpec::log_cosh(one(0.5), scalar(0.0), -0.6, scalar(0.0), one(1.0)).is_err());
        assert!(ProblemSpec::quadratic(one(1.0), scalar(0.0), one(-1.0)).is_err());
    }

    #[test]
    fn zero_noise_cov_is_zero() {
        let p = ProblemSpec::quadratic(one(2.0), scalar(1.0), one(0.0)).unwrap();
        assert_eq!(p.noise_cov_at_opt(10).matrix, one(0.0));
        let mut s = NoiseStream::new(0, 0);
        let g = p.stoch_gradient(&scalar(1.0), &mut s).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(s.counter(), 1);
    }

    #[test]
    fn smoothness_constants() {
        let p = ProblemSpec::log_cosh(one(1.0), scalar(0.0), 2.0, scalar(1.0), one(1.0)).unwrap();
        assert_relative_eq!(p.mu, 1.0);
        assert_relative_eq!(p.smoothness, 4.0);
        let r = ProblemSpec::linear_regression(DMatrix::identity(3, 3), DVector::zeros(3), 1.0)
            .unwrap();
        assert_relative_eq!(r.smoothness, 5.0);
    }
}

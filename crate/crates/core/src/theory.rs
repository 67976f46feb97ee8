//! Closed-form asymptotic quantities of constant step-size SGD.
//!
//! For a problem with Hessian `H*` and noise covariance `C = Σ_ε*` at the
//! optimum, the stationary distribution `π_γ` satisfies
//! `E[θ] − θ* = γΔ₁ + O(γ^{3/2})` and `E[(θ−θ*)(θ−θ*)ᵀ] = γ T C + O(γ^{3/2})`,
//! where `T` inverts `X ↦ H*X + XH*`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::problems::{ProblemSpec, Tensor3};

fn spd_eigen(name: &str, h: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    if !h.is_square() {
        return Err(Error::arg(format!("{name} must be square")));
    }
    let scale = h.amax().max(f64::MIN_POSITIVE);
    if (h - h.transpose()).amax() > 1e-10 * scale {
        return Err(Error::arg(format!("{name} must be symmetric")));
    }
    let eig = SymmetricEigen::new(h.clone());
    if eig.eigenvalues.iter().any(|&l| l.is_nan() || l <= 0.0) {
        return Err(Error::arg(format!("{name} must be positive definite")));
    }
    Ok(eig)
}

/// Solve `HX + XH = C` for symmetric positive definite `H`.
///
/// In the eigenbasis `H = QΛQᵀ` the solution is `X̃ᵢⱼ = C̃ᵢⱼ/(λᵢ+λⱼ)`.
pub fn lyapunov_solve(h: &DMatrix<f64>, c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = spd_eigen("H", h)?;
    if c.shape() != h.shape() {
        return Err(Error::Dimension {
            expected: h.nrows(),
            got: if c.nrows() != h.nrows() {
                c.nrows()
            } else {
                c.ncols()
            },
        });
    }
    let q = &eig.eigenvectors;
    let lambda = &eig.eigenvalues;
    let mut ct = q.transpose() * c * q;
    for i in 0..ct.nrows() {
        for j in 0..ct.ncols() {
            ct[(i, j)] /= lambda[i] + lambda[j];
        }
    }
    Ok(q * ct * q.transpose())
}

/// `Δ₁ = −½ H⁻¹ ∇³f(θ*)[T C]`, the coefficient of `γ` in the stationary bias.
pub fn first_order_bias(
    h: &DMatrix<f64>,
    third_deriv: &Tensor3,
    c: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    Error::check_dim(h.nrows(), third_deriv.dim())?;
    let tc = lyapunov_solve(h, c)?;
    let contracted = third_deriv.contract(&tc)?;
    let chol = h
        .clone()
        .cholesky()
        .ok_or_else(|| Error::arg("H must be positive definite"))?;
    Ok(chol.solve(&contracted) * -0.5)
}

/// `Σ∞ = H⁻¹ C H⁻¹`.
pub fn asymptotic_covariance(h: &DMatrix<f64>, noise_cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Error::check_dim(h.nrows(), noise_cov.nrows())?;
    Error::check_dim(h.ncols(), noise_cov.ncols())?;
    let h_inv = h
        .clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::arg("H is singular"))?;
    let out = &h_inv * noise_cov * &h_inv;
    Ok((&out + out.transpose()) * 0.5)
}

/// `η(θ) = ∇f(θ) − H*(θ − θ*)`.
pub fn eta_residual(problem: &ProblemSpec, theta: &DVector<f64>) -> Result<DVector<f64>> {
    let g = problem.gradient(theta)?;
    Ok(g - problem.hessian_at_opt() * (theta - &problem.theta_star))
}

/// `ψ(θ) = ½ ∇³f(θ*)[(θ−θ*)(θ−θ*)ᵀ]`.
pub fn psi_quadratic_term(problem: &ProblemSpec, theta: &DVector<f64>) -> Result<DVector<f64>> {
    Error::check_dim(problem.dim, theta.len())?;
    let u = theta - &problem.theta_star;
    let t3 = problem.third_derivative_at_opt()?;
    Ok(t3.contract(&(&u * u.transpose()))? * 0.5)
}

/// Closed-form theory quantities of a problem.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoryReport {
    #[serde(serialize_with = "crate::json::vector")]
    pub theta_star: DVector<f64>,
    #[serde(serialize_with = "crate::json::matrix_rows")]
    pub hessian: DMatrix<f64>,
    #[serde(serialize_with = "crate::json::matrix_rows")]
    pub noise_cov: DMatrix<f64>,
    #[serde(serialize_with = "crate::json::matrix_rows")]
    pub asymptotic_cov: DMatrix<f64>,
    #[serde(serialize_with = "crate::json::matrix_rows")]
    pub tc_matrix: DMatrix<f64>,
    #[serde(serialize_with = "crate::json::vector")]
    pub delta1: DVector<f64>,
    pub trace_noise_cov: f64,
    pub mu: f64,
    pub smoothness: f64,
    pub notes: Vec<String>,
}

impl TheoryReport {
    pub fn compute(problem: &ProblemSpec) -> Result<Self> {
        let hessian = problem.hessian_at_opt();
        let noise = problem.noise_cov_at_opt(1);
        let noise_cov = noise.matrix;
        let tc_matrix = lyapunov_solve(&hessian, &noise_cov)?;
        let t3 = problem.third_derivative_at_opt()?;
        let delta1 = first_order_bias(&hessian, &t3, &noise_cov)?;
        let asymptotic_cov = asymptotic_covariance(&hessian, &noise_cov)?;
        let mut notes = vec![
            "asymptotic_cov is H^-1 Sigma H^-1, the covariance for which sqrt(Tr Sigma)/sqrt(n) \
             is the leading term of E^{1/2}|H(avg - theta*)|^2"
                .to_string(),
            "tc_matrix solves H X + X H = noise_cov; gamma * tc_matrix is the leading \
             stationary covariance"
                .to_string(),
        ];
        if noise.closed_form {
            notes.push("noise_cov is exact (closed form of the noise model)".to_string());
        }
        Ok(Self {
            theta_star: problem.theta_star.clone(),
            trace_noise_cov: noise_cov.trace(),
            hessian,
            noise_cov,
            asymptotic_cov,
            tc_matrix,
            delta1,
            mu: problem.mu,
            smoothness: problem.smoothness,
            notes,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

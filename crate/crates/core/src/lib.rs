//! Constant step-size SGD with tail Polyak-Ruppert averaging and
//! Richardson-Romberg extrapolation over synchronously coupled chains.
//!
//! The crate is organised bottom-up:
//!
//! * [`rng`]: counter-based noise streams (replayable, forkable).
//! * [`problems`]: strongly convex test problems and their stochastic oracles.
//! * [`chains`]: SGD recursion, tail averages, coupled RR runs.
//! * [`theory`]: Lyapunov solves, first-order bias, asymptotic covariance.
//! * [`diagnostics`]: coupling decay, stationary moments, rate fits, audits.
//! * [`harness`]: deterministic parallel Monte-Carlo experiments.

pub mod chains;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod json;
pub mod problems;
pub mod rng;
pub mod stats;
pub mod theory;

pub use chains::{rr_combine, run_coupled_rr, run_tail_averaged, sgd_step, ChainRun, CoupledRun};
pub use error::{Error, Result};
pub use problems::{NoiseModel, ProblemKind, ProblemSpec, Tensor3};
pub use rng::{NoiseStream, StreamKey};
pub use theory::TheoryReport;

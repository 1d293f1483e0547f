//! Deconvolution density estimation under non-standard (periodic-zero) measurement errors.
//!
//! The crate estimates a density `f` at a point from observations `Y = X + ε`, where the error law
//! has a characteristic function with zeros on the real line (scaled sums of uniforms and the
//! symmetric binomial). Modules:
//!
//! - [`error_models`]: the error laws, their characteristic functions and samplers
//! - [`kernels`]: smooth compactly supported kernels and truncated deconvolution kernels
//! - [`estimators`]: the point estimator and its stochastic-error bounds
//! - [`tuning`]: rate exponents, oracle tuning parameters and default grids
//! - [`adaptive`]: data-driven selection of the bandwidth and truncation level
//! - [`lowerbound`]: the two-hypothesis construction behind the minimax lower bound
//! - [`harness`]: test densities, Monte Carlo risk, rate fitting and the CLI

pub mod adaptive;
pub mod error;
pub mod error_models;
pub mod estimators;
pub mod harness;
pub mod kernels;
pub mod lowerbound;
pub mod quadrature;
pub mod rng;
pub mod tuning;

pub use error::{DeconvError, Result};
pub use error_models::ErrorModel;
pub use kernels::{build_kernel, SmoothKernel, Sign};

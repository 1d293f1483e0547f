//! Simulation harness: target densities, Monte Carlo risk, rate fitting, the Bernstein
//! exceedance check and the command line front end.

pub mod cli;
pub mod densities;
pub mod experiment;

pub use cli::run_cli;
pub use densities::{sample_target, TestDensity};
pub use experiment::{
    bernstein_tail_check, fit_rate, monte_carlo_risk, oracle_bias, ExperimentPlan, RiskReport,
};

//! Monte Carlo experiments: risk tables, rate fits and the Bernstein exceedance check.
//!
//! Every trial owns two random streams derived from `(seed, n, trial)`, one for the latent sample
//! and one for the errors. Trials run in parallel and are collected in index order, so reports are
//! identical for any number of worker threads.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::adaptive::select_adaptive;
use crate::error::{DeconvError, Result};
use crate::error_models::{observation_density, ErrorModel};
use crate::estimators::{
    envelope_u, estimate_point, exact_mean, threshold_lambda, true_sigma_sq, TuningPair,
};
use crate::harness::densities::{sample_with, TestDensity};
use crate::kernels::{build_kernel, SmoothKernel, DEFAULT_ORDER};
use crate::quadrature::QuadOptions;
use crate::rng;
use crate::tuning::{default_grids_for, minimax_params_for, ClassParams};

/// Header line of every CSV written by [`write_csv`].
pub const CSV_SCHEMA: &str = "#deconv-lab v1";

/// Default evaluation point.
pub const DEFAULT_X0: f64 = 0.5;

/// `E f̂(x0) - f(x0)`: smoothed density plus truncation remainder, minus the target value.
pub fn oracle_bias(
    density: &TestDensity,
    model: &ErrorModel,
    kernel: &SmoothKernel,
    tau: &TuningPair,
    x0: f64,
) -> Result<f64> {
    let f = |x: f64| density.pdf(x);
    Ok(exact_mean(model, kernel, tau, x0, f)? - density.pdf(x0))
}

/// How the tuning pair is chosen in each trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum EstimatorMode {
    Fixed {
        h: f64,
        #[serde(rename = "N")]
        n_cut: usize,
    },
    Minimax(ClassParams),
    Adaptive {
        #[serde(default)]
        kappa: Option<f64>,
    },
}

impl EstimatorMode {
    pub fn label(&self) -> &'static str {
        match self {
            EstimatorMode::Fixed { .. } => "fixed",
            EstimatorMode::Minimax(_) => "minimax",
            EstimatorMode::Adaptive { .. } => "adaptive",
        }
    }
}

fn default_x0() -> f64 {
    DEFAULT_X0
}

fn default_kernel_order() -> u32 {
    DEFAULT_ORDER
}

fn error_model_field<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<ErrorModel, D::Error> {
    use serde::de::Error;
    match serde_json::Value::deserialize(de)? {
        serde_json::Value::String(s) => s.parse().map_err(D::Error::custom),
        other => serde_json::from_value(other).map_err(|e| D::Error::custom(format!("error model: {e}"))),
    }
}

/// A simulation study: one risk row per sample size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub density: TestDensity,
    /// Either the object form or the text form `uniform:m=1,theta=1`.
    #[serde(deserialize_with = "error_model_field")]
    pub error: ErrorModel,
    #[serde(default = "default_x0")]
    pub x0: f64,
    pub n_list: Vec<usize>,
    pub trials: usize,
    pub mode: EstimatorMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Number of vanishing kernel moments.
    #[serde(default = "default_kernel_order")]
    pub kernel_order: u32,
}

impl ExperimentPlan {
    pub fn from_json(text: &str) -> Result<Self> {
        let plan: ExperimentPlan = serde_json::from_str(text)?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        self.density.validate()?;
        self.error.validate()?;
        if !self.x0.is_finite() {
            return Err(DeconvError::invalid("x0 must be finite"));
        }
        if self.trials == 0 {
            return Err(DeconvError::invalid("trials must be at least 1"));
        }
        if self.n_list.is_empty() || self.n_list[0] == 0 {
            return Err(DeconvError::invalid("n_list must hold positive sample sizes"));
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) {
            return Err(DeconvError::invalid("n_list must be strictly ascending"));
        }
        build_kernel(self.kernel_order)?;
        match self.mode {
            EstimatorMode::Fixed { h, n_cut } => {
                TuningPair::new(h, n_cut)?;
            }
            EstimatorMode::Minimax(params) => {
                minimax_params_for(self.n_list[0].max(2), &params, &self.error)?;
            }
            EstimatorMode::Adaptive { kappa } => {
                if let Some(k) = kappa {
                    if !(k > 0.0 && k.is_finite()) {
                        return Err(DeconvError::invalid(format!("kappa must be positive, got {k}")));
                    }
                }
                for &n in &self.n_list {
                    default_grids_for(n, &self.error)?;
                }
            }
        }
        Ok(())
    }
}

/// Result of one replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub estimate: f64,
    pub sq_error: f64,
    pub h: f64,
    #[serde(rename = "N")]
    pub n_cut: usize,
}

/// All replications at one sample size; failed trials keep their error message.
#[derive(Debug, Clone)]
pub struct TrialBatch {
    pub n: usize,
    pub outcomes: Vec<std::result::Result<TrialOutcome, String>>,
}

impl TrialBatch {
    pub fn successes(&self) -> impl Iterator<Item = &TrialOutcome> {
        self.outcomes.iter().filter_map(|o| o.as_ref().ok())
    }
}

/// Observations `Y = X + e` of replication `trial` at sample size `n`.
pub fn trial_sample(plan: &ExperimentPlan, n: usize, trial: usize) -> Result<Vec<f64>> {
    let path = [n as u64, trial as u64];
    let mut target_rng = rng::stream(plan.seed, "target", &path);
    let mut error_rng = rng::stream(plan.seed, "errors", &path);
    let mut ys = sample_with(&plan.density, n, &mut target_rng)?;
    for y in ys.iter_mut() {
        *y += plan.error.draw(&mut error_rng);
    }
    Ok(ys)
}

/// Runs every replication of `plan` with a custom estimator returning `(estimate, tuning)`.
pub fn run_trials_with<E>(plan: &ExperimentPlan, estimator: E) -> Result<Vec<TrialBatch>>
where
    E: Fn(&[f64], usize) -> Result<(f64, TuningPair)> + Sync,
{
    plan.validate()?;
    let truth = plan.density.pdf(plan.x0);
    let mut batches = Vec::with_capacity(plan.n_list.len());
    for &n in &plan.n_list {
        let outcomes: Vec<_> = (0..plan.trials)
            .into_par_iter()
            .map(|trial| {
                let ys = trial_sample(plan, n, trial)?;
                let (estimate, tau) = estimator(&ys, n)?;
                if !estimate.is_finite() {
                    return Err(DeconvError::numeric("non-finite estimate"));
                }
                let err = estimate - truth;
                Ok(TrialOutcome { estimate, sq_error: err * err, h: tau.h, n_cut: tau.n_cut })
            })
            .map(|r: Result<TrialOutcome>| r.map_err(|e| e.to_string()))
            .collect();
        let failed = outcomes.iter().filter(|o| o.is_err()).count();
        if failed > 0 {
            log::warn!("n = {n}: {failed} of {} trials failed", plan.trials);
        }
        if failed * 100 > plan.trials {
            let first = outcomes.iter().find_map(|o| o.as_ref().err()).cloned().unwrap_or_default();
            return Err(DeconvError::numeric(format!(
                "n = {n}: {failed} of {} trials failed (first: {first})",
                plan.trials
            )));
        }
        batches.push(TrialBatch { n, outcomes });
    }
    Ok(batches)
}

/// Runs every replication of `plan` with the estimator configured by `plan.mode`.
pub fn run_trials(plan: &ExperimentPlan) -> Result<Vec<TrialBatch>> {
    plan.validate()?;
    let kernel = build_kernel(plan.kernel_order)?;
    let model = plan.error;
    let x0 = plan.x0;
    match plan.mode {
        EstimatorMode::Fixed { h, n_cut } => {
            let tau = TuningPair::new(h, n_cut)?;
            run_trials_with(plan, |ys, _| Ok((estimate_point(ys, x0, &model, &kernel, &tau)?, tau)))
        }
        EstimatorMode::Minimax(params) => {
            let taus: Vec<(usize, TuningPair)> = plan
                .n_list
                .iter()
                .map(|&n| Ok((n, minimax_params_for(n, &params, &model)?)))
                .collect::<Result<_>>()?;
            run_trials_with(plan, |ys, n| {
                let tau = taus.iter().find(|(m, _)| *m == n).expect("tuning for every n").1;
                Ok((estimate_point(ys, x0, &model, &kernel, &tau)?, tau))
            })
        }
        EstimatorMode::Adaptive { kappa } => {
            let grids = plan
                .n_list
                .iter()
                .map(|&n| Ok((n, default_grids_for(n, &model)?)))
                .collect::<Result<Vec<_>>>()?;
            run_trials_with(plan, |ys, n| {
                let grid = &grids.iter().find(|(m, _)| *m == n).expect("grid for every n").1;
                let (tau, est, _) = select_adaptive(ys, x0, &model, &kernel, grid, kappa)?;
                Ok((est, tau))
            })
        }
    }
}

/// One line of the risk table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub n: usize,
    pub trials: usize,
    pub mse: f64,
    pub rmse: f64,
    /// Standard error of `mse`.
    pub se: f64,
    pub mean_h: f64,
    #[serde(rename = "mean_N")]
    pub mean_n: f64,
    pub mode: String,
    pub seed: u64,
}

/// Risk table with the fitted log-log slope of the root-MSE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub rows: Vec<RiskRow>,
    pub slope: Option<f64>,
    pub half_width: Option<f64>,
}

/// Aggregates batches in order; the slope is fitted when there are at least three rows.
pub fn summarize(plan: &ExperimentPlan, batches: &[TrialBatch]) -> RiskReport {
    let rows: Vec<RiskRow> = batches
        .iter()
        .map(|b| {
            let ok: Vec<&TrialOutcome> = b.successes().collect();
            let t = ok.len() as f64;
            let mse = ok.iter().map(|o| o.sq_error).sum::<f64>() / t;
            let var = if ok.len() > 1 {
                ok.iter().map(|o| (o.sq_error - mse).powi(2)).sum::<f64>() / (t - 1.0)
            } else {
                0.0
            };
            RiskRow {
                n: b.n,
                trials: ok.len(),
                mse,
                rmse: mse.sqrt(),
                se: (var / t).sqrt(),
                mean_h: ok.iter().map(|o| o.h).sum::<f64>() / t,
                mean_n: ok.iter().map(|o| o.n_cut as f64).sum::<f64>() / t,
                mode: plan.mode.label().to_string(),
                seed: plan.seed,
            }
        })
        .collect();
    let mut report = RiskReport { rows, slope: None, half_width: None };
    if let Ok(fit) = fit_rate(&report) {
        report.slope = Some(fit.slope);
        report.half_width = Some(fit.half_width);
    }
    report
}

/// Runs `plan` and aggregates the risk table.
pub fn monte_carlo_risk(plan: &ExperimentPlan) -> Result<RiskReport> {
    let batches = run_trials(plan)?;
    Ok(summarize(plan, &batches))
}

/// Writes the schema line and the risk rows as CSV.
pub fn write_csv<W: Write>(report: &RiskReport, mut out: W) -> Result<()> {
    writeln!(out, "{CSV_SCHEMA}")?;
    let mut w = csv::Writer::from_writer(out);
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_csv_path(report: &RiskReport, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_csv(report, std::io::BufWriter::new(file))
}

/// Least-squares line through `(ln x, ln y)` with a 95% confidence half-width for the slope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub half_width: f64,
}

pub fn fit_log_log(xs: &[f64], ys: &[f64]) -> Result<RateFit> {
    if xs.len() != ys.len() {
        return Err(DeconvError::invalid("x and y lengths differ"));
    }
    if xs.len() < 3 {
        return Err(DeconvError::invalid(format!("rate fit needs at least 3 points, got {}", xs.len())));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(DeconvError::invalid("rate fit needs positive finite values"));
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(DeconvError::invalid("rate fit needs distinct x values"));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    let dof = k - 2.0;
    let se = (rss / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| DeconvError::numeric(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(RateFit { slope, intercept, half_width: t * se })
}

/// Slope of `ln rmse` against `ln n` over the report rows.
pub fn fit_rate(report: &RiskReport) -> Result<RateFit> {
    let ns: Vec<f64> = report.rows.iter().map(|r| r.n as f64).collect();
    let rmse: Vec<f64> = report.rows.iter().map(|r| r.rmse).collect();
    fit_log_log(&ns, &rmse)
}

/// Settings of [`bernstein_tail_check`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailCheckConfig {
    pub x0: f64,
    pub n: usize,
    pub kappa: f64,
    pub replications: usize,
    pub seed: u64,
    /// Multiplies `σ` inside the threshold.
    pub sigma_scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailCheckReport {
    pub exceedances: usize,
    pub replications: usize,
    pub frequency: f64,
    /// `2 e^{-κ}`.
    pub bound: f64,
    /// Binomial standard error at the bound.
    pub standard_error: f64,
    pub lambda: f64,
    pub sigma_sq: f64,
    pub mean: f64,
    pub within_bound: bool,
}

/// Frequency of `|f̂_τ(x0) - E f̂_τ(x0)| >= Λ_τ(κ)` over independent samples, with `Λ` built from
/// the exact second moment and the mean taken from quadrature.
pub fn bernstein_tail_check(
    model: &ErrorModel,
    kernel: &SmoothKernel,
    tau: &TuningPair,
    density: &TestDensity,
    cfg: &TailCheckConfig,
) -> Result<TailCheckReport> {
    if cfg.replications < 1000 {
        return Err(DeconvError::invalid(format!(
            "the tail check needs at least 1000 replications, got {}",
            cfg.replications
        )));
    }
    if !(cfg.kappa > 0.0 && cfg.sigma_scale > 0.0 && cfg.n > 0) {
        return Err(DeconvError::invalid("kappa, sigma_scale and n must be positive"));
    }
    density.validate()?;
    let f = |x: f64| density.pdf(x);
    let breaks = density.breakpoints();
    let opts = QuadOptions { abs_tol: 1e-13, rel_tol: 1e-10, max_intervals: 4_000 };
    let f_y = |y: f64| observation_density(model, f, y, &breaks, opts).unwrap_or(f64::NAN);
    let sigma_sq = true_sigma_sq(model, kernel, tau, cfg.x0, f_y)?;
    if !sigma_sq.is_finite() {
        return Err(DeconvError::numeric("second moment of the kernel is not finite"));
    }
    let mean = exact_mean(model, kernel, tau, cfg.x0, f)?;
    let u = envelope_u(model, kernel, tau);
    let lambda = threshold_lambda(cfg.sigma_scale * sigma_sq.sqrt(), u, cfg.kappa, cfg.n);
    let plan = ExperimentPlan {
        density: density.clone(),
        error: *model,
        x0: cfg.x0,
        n_list: vec![cfg.n],
        trials: cfg.replications,
        mode: EstimatorMode::Fixed { h: tau.h, n_cut: tau.n_cut },
        seed: cfg.seed,
        out: None,
        kernel_order: kernel.order(),
    };
    let hits: Vec<bool> = (0..cfg.replications)
        .into_par_iter()
        .map(|trial| {
            let ys = trial_sample(&plan, cfg.n, trial)?;
            let est = estimate_point(&ys, cfg.x0, model, kernel, tau)?;
            Ok((est - mean).abs() >= lambda)
        })
        .collect::<Result<_>>()?;
    let exceedances = hits.iter().filter(|&&h| h).count();
    let reps = cfg.replications as f64;
    let frequency = exceedances as f64 / reps;
    let bound = 2.0 * (-cfg.kappa).exp();
    let p = bound.min(1.0);
    let standard_error = (p * (1.0 - p) / reps).sqrt();
    Ok(TailCheckReport {
        exceedances,
        replications: cfg.replications,
        frequency,
        bound,
        standard_error,
        lambda,
        sigma_sq,
        mean,
        within_bound: frequency <= bound + 3.0 * standard_error,
    })
}

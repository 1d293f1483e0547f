//! Data-driven choice of the bandwidth and the series cut-off.
//!
//! Every candidate `τ = (h, N)` receives the score
//! `R̂_τ = sup_{τ'} [|f̂_{τ∨∧τ'} - f̂_{τ'}| - Λ̂_{τ∨∧τ'} - Λ̂_{τ'}]_+ + Λ̂_τ + sup_{τ'} Λ̂_{τ∨∧τ'}`
//! with `τ∨∧τ' = (h ∨ h', N ∧ N')`, and the candidate with the smallest score wins. Because the
//! combined pair of two grid points is again a grid point, one table of estimates and thresholds
//! per grid point covers every comparison.

use serde::{Deserialize, Serialize};

use crate::error::{DeconvError, Result};
use crate::error_models::ErrorModel;
use crate::estimators::{
    envelope_u, estimate_point, threshold_lambda_hat, TuningPair, WindowSums,
};
use crate::kernels::{Sign, SmoothKernel};
use crate::tuning::GridSpec;

/// `(h ∨ h', N ∧ N')` on a common branch.
pub fn aux_tuning(tau: &TuningPair, tau_prime: &TuningPair) -> Result<TuningPair> {
    let sign = match (tau.sign, tau_prime.sign) {
        (Some(a), Some(b)) if a != b => {
            return Err(DeconvError::invalid(
                "cannot combine tuning pairs from different estimator branches",
            ))
        }
        (a, b) => a.or(b),
    };
    Ok(TuningPair {
        h: tau.h.max(tau_prime.h),
        n_cut: tau.n_cut.min(tau_prime.n_cut),
        sign,
    })
}

/// `f̂_{τ∨∧τ'}(x0)`.
pub fn aux_estimate(
    sample: &[f64],
    x0: f64,
    model: &ErrorModel,
    kernel: &SmoothKernel,
    tau: &TuningPair,
    tau_prime: &TuningPair,
) -> Result<f64> {
    estimate_point(sample, x0, model, kernel, &aux_tuning(tau, tau_prime)?)
}

/// One grid point of the selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub h: f64,
    #[serde(rename = "N")]
    pub n_cut: usize,
    pub estimate: f64,
    pub sigma_hat: f64,
    pub u: f64,
    pub lambda_hat: f64,
    pub risk: f64,
}

/// Full record of one adaptive selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveTrace {
    pub x0: f64,
    pub kappa: f64,
    pub sign: Sign,
    /// Grid points ordered by descending `h`, then ascending `N`.
    pub records: Vec<TraceRecord>,
    pub chosen: TuningPair,
    pub estimate: f64,
}

/// Estimates and thresholds at every grid point, indexed `[bandwidth][cut-off]` with bandwidths
/// descending and cut-offs ascending.
struct Table {
    grid: GridSpec,
    estimate: Vec<Vec<f64>>,
    sigma_hat: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    lambda: Vec<Vec<f64>>,
}

impl Table {
    #[allow(clippy::too_many_arguments)]
    fn build(
        sample: &[f64],
        x0: f64,
        model: &ErrorModel,
        kernel: &SmoothKernel,
        grid: &GridSpec,
        sign: Sign,
        kappa: f64,
    ) -> Result<Table> {
        let grid = grid.normalized()?;
        let n = sample.len();
        let n_max = *grid.cutoffs.last().expect("grid has cut-offs");
        let mut table = Table {
            estimate: Vec::new(),
            sigma_hat: Vec::new(),
            u: Vec::new(),
            lambda: Vec::new(),
            grid,
        };
        for &h in &table.grid.bandwidths {
            let sums = WindowSums::compute(sample, x0, model, kernel, sign, h, n_max)?;
            let mut est = Vec::new();
            let mut sig = Vec::new();
            let mut env = Vec::new();
            let mut lam = Vec::new();
            for &n_cut in &table.grid.cutoffs {
                let tau = TuningPair::new(h, n_cut)?.with_sign(sign);
                let sigma_hat = sums.sigma_sq(n_cut).sqrt();
                let u = envelope_u(model, kernel, &tau);
                est.push(sums.estimate(n_cut));
                sig.push(sigma_hat);
                env.push(u);
                lam.push(threshold_lambda_hat(sigma_hat, u, kappa, n));
            }
            table.estimate.push(est);
            table.sigma_hat.push(sig);
            table.u.push(env);
            table.lambda.push(lam);
        }
        Ok(table)
    }

    /// `R̂` at grid indices `(i, k)`. With bandwidths descending, `h ∨ h'` is the smaller index;
    /// with cut-offs ascending, `N ∧ N'` is the smaller index too.
    fn risk(&self, i: usize, k: usize) -> f64 {
        let mut sup_diff: f64 = 0.0;
        let mut sup_lambda: f64 = 0.0;
        for ip in 0..self.grid.bandwidths.len() {
            for kp in 0..self.grid.cutoffs.len() {
                let (ci, ck) = (i.min(ip), k.min(kp));
                let diff = (self.estimate[ci][ck] - self.estimate[ip][kp]).abs()
                    - self.lambda[ci][ck]
                    - self.lambda[ip][kp];
                sup_diff = sup_diff.max(diff);
                sup_lambda = sup_lambda.max(self.lambda[ci][ck]);
            }
        }
        sup_diff + self.lambda[i][k] + sup_lambda
    }

    fn index_of(&self, tau: &TuningPair) -> Option<(usize, usize)> {
        let i = self.grid.bandwidths.iter().position(|&h| h == tau.h)?;
        let k = self.grid.cutoffs.iter().position(|&n| n == tau.n_cut)?;
        Some((i, k))
    }
}

fn resolve_kappa(kappa: Option<f64>, n: usize) -> Result<f64> {
    let kappa = kappa.unwrap_or_else(|| default_kappa(n));
    if !(kappa.is_finite() && kappa > 0.0) {
        return Err(DeconvError::invalid(format!("kappa must be positive, got {kappa}")));
    }
    Ok(kappa)
}

/// `κ* = 5 ln n`.
pub fn default_kappa(n: usize) -> f64 {
    5.0 * (n as f64).ln()
}

fn branch(x0: f64, tau: Option<&TuningPair>) -> Result<Sign> {
    let sign = Sign::for_point(x0);
    if let Some(s) = tau.and_then(|t| t.sign) {
        if s != sign {
            return Err(DeconvError::invalid(
                "adaptive selection uses the branch fixed by x0; the tuning pair disagrees",
            ));
        }
    }
    Ok(sign)
}

/// `R̂_τ(x0)` over `grid`; `tau` must be a grid point.
pub fn risk_proxy(
    sample: &[f64],
    x0: f64,
    model: &ErrorModel,
    kernel: &SmoothKernel,
    grid: &GridSpec,
    tau: &TuningPair,
    kappa: f64,
) -> Result<f64> {
    let sign = branch(x0, Some(tau))?;
    let kappa = resolve_kappa(Some(kappa), sample.len())?;
    let table = Table::build(sample, x0, model, kernel, grid, sign, kappa)?;
    let (i, k) = table
        .index_of(tau)
        .ok_or_else(|| DeconvError::invalid(format!("({}, {}) is not a grid point", tau.h, tau.n_cut)))?;
    Ok(table.risk(i, k))
}

/// Selects `τ̂ = argmin R̂_τ`; ties go to the largest `h`, then the smallest `N`. `κ` defaults to
/// `5 ln n`.
pub fn select_adaptive(
    sample: &[f64],
    x0: f64,
    model: &ErrorModel,
    kernel: &SmoothKernel,
    grid: &GridSpec,
    kappa: Option<f64>,
) -> Result<(TuningPair, f64, AdaptiveTrace)> {
    if grid.is_empty() {
        return Err(DeconvError::invalid("adaptive selection needs a nonempty grid"));
    }
    let sign = branch(x0, None)?;
    let kappa = resolve_kappa(kappa, sample.len())?;
    let table = Table::build(sample, x0, model, kernel, grid, sign, kappa)?;

    let mut records = Vec::with_capacity(table.grid.len());
    let mut best: Option<(usize, usize, f64)> = None;
    for (i, &h) in table.grid.bandwidths.iter().enumerate() {
        for (k, &n_cut) in table.grid.cutoffs.iter().enumerate() {
            let risk = table.risk(i, k);
            let record = TraceRecord {
                h,
                n_cut,
                estimate: table.estimate[i][k],
                sigma_hat: table.sigma_hat[i][k],
                u: table.u[i][k],
                lambda_hat: table.lambda[i][k],
                risk,
            };
            if !(record.estimate.is_finite() && record.lambda_hat.is_finite() && risk.is_finite()) {
                return Err(DeconvError::numeric(format!(
                    "non-finite selection statistics at h = {h}, N = {n_cut}"
                )));
            }
            records.push(record);
            // strict comparison keeps the first minimiser in (h descending, N ascending) order
            if best.is_none_or(|(_, _, r)| risk < r) {
                best = Some((i, k, risk));
            }
        }
    }
    let (i, k, _) = best.expect("grid is nonempty");
    let chosen = TuningPair::new(table.grid.bandwidths[i], table.grid.cutoffs[k])?.with_sign(sign);
    let estimate = table.estimate[i][k];
    let trace = AdaptiveTrace {
        x0,
        kappa,
        sign,
        records,
        chosen,
        estimate,
    };
    Ok((chosen, estimate, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{empirical_sigma_sq, threshold_lambda_hat};
    use crate::kernels::build_kernel;
    use rand::Rng;
    use rand_distr::{Cauchy, Distribution};

    fn simulated(n: usize, seed: u64) -> Vec<f64> {
        let model = ErrorModel::uniform(1, 1.0).unwrap();
        let mut rng = crate::rng::stream(seed, "adaptive-test", &[]);
        let c = Cauchy::new(0.0, 1.0).unwrap();
        (0..n).map(|_| c.sample(&mut rng) + model.draw(&mut rng)).collect()
    }

    #[test]
    fn aux_tuning_examples() {
        let a = TuningPair::new(1.0, 2).unwrap();
        let b = TuningPair::new(0.5, 5).unwrap();
        assert_eq!(aux_tuning(&a, &a).unwrap(), a);
        let c = aux_tuning(&a, &b).unwrap();
        assert_eq!((c.h, c.n_cut), (1.0, 2));
        assert_eq!(c, aux_tuning(&b, &a).unwrap());
        assert!(aux_tuning(&a.with_sign(Sign::Plus), &b.with_sign(Sign::Minus)).is_err());
    }

    #[test]
    fn aux_estimate_is_symmetric() {
        let k = build_kernel(5).unwrap();
        let model = ErrorModel::uniform(1, 1.0).unwrap();
        let sample = simulated(800, 3);
        let a = TuningPair::new(0.7, 3).unwrap();
        let b = TuningPair::new(0.3, 9).unwrap();
        let ab = aux_estimate(&sample, 0.5, &model, &k, &a, &b).unwrap();
        let ba = aux_estimate(&sample, 0.5, &model, &k, &b, &a).unwrap();
        assert_eq!(ab, ba);
        let direct = estimate_point(&sample, 0.5, &model, &k, &TuningPair::new(0.7, 3).unwrap()).unwrap();
        assert_eq!(ab, direct);
        assert_eq!(
            aux_estimate(&sample, 0.5, &model, &k, &a, &a).unwrap(),
            estimate_point(&sample, 0.5, &model, &k, &a).unwrap()
        );
    }

    #[test]
    fn singleton_grid() {
        let k = build_kernel(5).unwrap();
        let model = ErrorModel::uniform(1, 1.0).unwrap();
        let sample = simulated(500, 4);
        let grid = GridSpec::new(vec![0.4], vec![3]).unwrap();
        let tau = TuningPair::new(0.4, 3).unwrap();
        let kappa = 6.0;
        let r = risk_proxy(&sample, 0.5, &model, &k, &grid, &tau, kappa).unwrap();
        let sigma = empirical_sigma_sq(&sample, 0.5, &model, &k, &tau).unwrap().sqrt();
        let lam = threshold_lambda_hat(sigma, envelope_u(&model, &k, &tau), kappa, 500);
        assert!((r - 2.0 * lam).abs() < 1e-12 * lam);

        let (chosen, est, trace) = select_adaptive(&sample, 0.5, &model, &k, &grid, None).unwrap();
        assert_eq!((chosen.h, chosen.n_cut), (0.4, 3));
        assert_eq!(est, estimate_point(&sample, 0.5, &model, &k, &tau).unwrap());
        assert_eq!(trace.records.len(), 1);
        assert!((trace.kappa - 5.0 * 500f64.ln()).abs() < 1e-12);
        assert!(select_adaptive(&sample, 0.5, &model, &k, &GridSpec { bandwidths: vec![], cutoffs: vec![] }, None).is_err());
    }

    /// Literal double loop over the grid with every estimator recomputed from scratch.
    fn brute_force_risk(
        sample: &[f64],
        x0: f64,
        model: &ErrorModel,
        k: &SmoothKernel,
        grid: &[(f64, usize)],
        tau: (f64, usize),
        kappa: f64,
    ) -> f64 {
        let n = sample.len();
        let lam = |h: f64, big_n: usize| {
            let t = TuningPair::new(h, big_n).unwrap();
            let s = empirical_sigma_sq(sample, x0, model, k, &t).unwrap().sqrt();
            threshold_lambda_hat(s, envelope_u(model, k, &t), kappa, n)
        };
        let est = |h: f64, big_n: usize| {
            estimate_point(sample, x0, model, k, &TuningPair::new(h, big_n).unwrap()).unwrap()
        };
        let mut first: f64 = 0.0;
        let mut second: f64 = 0.0;
        for &(hp, np) in grid {
            let (hc, nc) = (tau.0.max(hp), tau.1.min(np));
            first = first.max((est(hc, nc) - est(hp, np)).abs() - lam(hc, nc) - lam(hp, np));
            second = second.max(lam(hc, nc));
        }
        first.max(0.0) + lam(tau.0, tau.1) + second
    }

    #[test]
    fn risk_matches_brute_force() {
        let k = build_kernel(5).unwrap();
        let model = ErrorModel::uniform(1, 1.0).unwrap();
        let sample = simulated(1000, 5);
        let grid = GridSpec::new(vec![0.8, 0.2], vec![2, 7]).unwrap();
        let points: Vec<(f64, usize)> = grid.points().collect();
        for kappa in [0.05, 1.0, 8.0] {
            for &(h, big_n) in &points {
                let tau = TuningPair::new(h, big_n).unwrap();
                let fast = risk_proxy(&sample, 0.5, &model, &k, &grid, &tau, kappa).unwrap();
                let slow = brute_force_risk(&sample, 0.5, &model, &k, &points, (h, big_n), kappa);
                assert!((fast - slow).abs() <= 1e-12 * slow, "{fast} vs {slow}");
                let sigma = empirical_sigma_sq(&sample, 0.5, &model, &k, &tau).unwrap().sqrt();
                assert!(fast >= threshold_lambda_hat(sigma, envelope_u(&model, &k, &tau), kappa, 1000));
            }
        }
        assert!(risk_proxy(&sample, 0.5, &model, &k, &grid, &TuningPair::new(0.3, 2).unwrap(), 1.0).is_err());
    }

    #[test]
    fn selects_brute_force_minimiser() {
        let k = build_kernel(5).unwrap();
        let model = ErrorModel::uniform(1, 1.0).unwrap();
        let sample = simulated(2000, 6);
        let grid = GridSpec::new(vec![0.9, 0.45, 0.225], vec![1, 3, 6, 12]).unwrap();
        let points: Vec<(f64, usize)> = grid.points().collect();
        let kappa = 0.2;
        let risks: Vec<f64> = points
            .iter()
            .map(|&p| brute_force_risk(&sample, 0.5, &model, &k, &points, p, kappa))
            .collect();
        let min = risks.iter().cloned().fold(f64::INFINITY, f64::min);
        let winners: Vec<_> = points.iter().zip(&risks).filter(|(_, &r)| r == min).collect();
        assert_eq!(winners.len(), 1, "fixture must have a strict minimiser");
        let (chosen, _, trace) = select_adaptive(&sample, 0.5, &model, &k, &grid, Some(kappa)).unwrap();
        assert_eq!((chosen.h, chosen.n_cut), *winners[0].0);
        let best = trace.records.iter().map(|r| r.risk).fold(f64::INFINITY, f64::min);
        let rec = trace.records.iter().find(|r| r.h == chosen.h && r.n_cut == chosen.n_cut).unwrap();
        assert_eq!(rec.risk, best);
    }

    #[test]
    fn ties_go_to_largest_bandwidth_then_smallest_cutoff() {
        let k = build_kernel(5).unwrap();
        let model = ErrorModel::uniform(1, 1.0).unwrap();
        // every observation is far from every window: all estimates and σ̂ vanish
        let sample = vec![-500.0; 50];
        let grid = GridSpec::new(vec![0.25, 1.0, 0.5], vec![4, 2, 8]).unwrap();
        let (chosen, est, trace) = select_adaptive(&sample, 0.5, &model, &k, &grid, None).unwrap();
        assert_eq!((chosen.h, chosen.n_cut), (1.0, 2));
        assert_eq!(est, 0.0);
        let tied = trace.records.iter().filter(|r| r.risk == trace.records[0].risk).count();
        assert_eq!(tied, 3);
    }

    #[test]
    fn invariant_to_grid_order() {
        let k = build_kernel(5).unwrap();
        let model = ErrorModel::uniform(1, 1.0).unwrap();
        let mut rng = crate::rng::stream(7, "order", &[]);
        let sample = simulated(1500, 8);
        let base = GridSpec::new(vec![1.0, 0.5, 0.25], (1..=8).collect()).unwrap();
        let reference = select_adaptive(&sample, 0.5, &model, &k, &base, None).unwrap();
        for _ in 0..5 {
            let mut hs = base.bandwidths.clone();
            let mut ns = base.cutoffs.clone();
            for i in (1..hs.len()).rev() {
                hs.swap(i, rng.random_range(0..=i));
            }
            for i in (1..ns.len()).rev() {
                ns.swap(i, rng.random_range(0..=i));
            }
            let shuffled = GridSpec { bandwidths: hs, cutoffs: ns };
            let out = select_adaptive(&sample, 0.5, &model, &k, &shuffled, None).unwrap();
            assert_eq!(out.0, reference.0);
            assert_eq!(out.1, reference.1);
            assert_eq!(out.2, reference.2);
        }
    }

    #[test]
    fn negative_point_uses_minus_branch() {
        let k = build_kernel(5).unwrap();
        let model = ErrorModel::uniform(1, 1.0).unwrap();
        let sample = simulated(800, 9);
        let grid = GridSpec::new(vec![0.5], vec![4]).unwrap();
        let (chosen, est, _) = select_adaptive(&sample, -0.5, &model, &k, &grid, None).unwrap();
        assert_eq!(chosen.sign, Some(Sign::Minus));
        let direct = estimate_point(&sample, -0.5, &model, &k, &TuningPair::new(0.5, 4).unwrap()).unwrap();
        assert_eq!(est, direct);
    }
}

//! The pointwise deconvolution estimator, its variance proxies and the Bernstein thresholds.
//!
//! For a tuning pair `τ = (h, N)` the estimator at `x0` is the sample mean of
//! `L^{±}_{h,N}(Y_i - x0)`. Every quantity that depends on the sample (the estimate itself and the
//! empirical variance `σ̂²_τ`) is a weighted sum over series terms `j` of per-term sample sums, so
//! both are computed from one pass over the data through [`WindowSums`].

use serde::{Deserialize, Serialize};

use crate::error::{DeconvError, Result};
use crate::error_models::{composition_coeff, ErrorModel};
use crate::kernels::{remainder_step, remainder_weights, DeconvKernel, Sign, SmoothKernel};
use crate::quadrature::{integrate, QuadOptions};

/// Bandwidth, series cut-off and (optionally) the estimator branch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuningPair {
    pub h: f64,
    #[serde(rename = "N")]
    pub n_cut: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sign: Option<Sign>,
}

impl TuningPair {
    pub fn new(h: f64, n_cut: usize) -> Result<Self> {
        let tau = TuningPair {
            h,
            n_cut,
            sign: None,
        };
        tau.validate()?;
        Ok(tau)
    }

    pub fn with_sign(self, sign: Sign) -> Self {
        TuningPair {
            sign: Some(sign),
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h.is_finite() && self.h > 0.0) {
            return Err(DeconvError::invalid(format!(
                "bandwidth must be positive and finite, got {}",
                self.h
            )));
        }
        Ok(())
    }

    /// The explicit branch, or the default one for `x0`.
    pub fn sign_at(&self, x0: f64) -> Sign {
        self.sign.unwrap_or_else(|| Sign::for_point(x0))
    }
}

fn check_sample(sample: &[f64], x0: f64) -> Result<()> {
    if sample.is_empty() {
        return Err(DeconvError::invalid("sample must contain at least one observation"));
    }
    if !x0.is_finite() {
        return Err(DeconvError::invalid(format!("x0 must be finite, got {x0}")));
    }
    if let Some(bad) = sample.iter().find(|y| !y.is_finite()) {
        return Err(DeconvError::invalid(format!("sample contains a non-finite value {bad}")));
    }
    Ok(())
}

/// Per-term sample sums for one bandwidth and branch, valid for every cut-off `N <= n_max`.
///
/// For term `j` it stores `S_j = Σ_i K^{(r)}(a_ij)` and `Q_j = Σ_i K^{(r)}(a_ij)^2`, where `a_ij`
/// is the scaled argument of window `j` at observation `i`. The estimate and `σ̂²` at cut-off `N`
/// are prefix sums over `j <= N`, so the result at a given `N` does not depend on `n_max`.
#[derive(Debug, Clone)]
pub struct WindowSums {
    h: f64,
    sign: Sign,
    n: usize,
    prefactor: f64,
    estimate_prefix: Vec<f64>,
    sigma_sq_prefix: Vec<f64>,
}

impl WindowSums {
    pub fn compute(
        sample: &[f64],
        x0: f64,
        model: &ErrorModel,
        kernel: &SmoothKernel,
        sign: Sign,
        h: f64,
        n_max: usize,
    ) -> Result<Self> {
        check_sample(sample, x0)?;
        let lk = DeconvKernel::new(model, kernel, sign, h, n_max)?;
        let mut sums = vec![0.0; n_max + 1];
        let mut sq_sums = vec![0.0; n_max + 1];
        for &y in sample {
            lk.for_each_term(y - x0, |j, v| {
                sums[j] += v;
                sq_sums[j] += v * v;
            });
        }
        let mut estimate_prefix = Vec::with_capacity(n_max + 1);
        let mut sigma_sq_prefix = Vec::with_capacity(n_max + 1);
        let (mut e, mut s) = (0.0, 0.0);
        for j in 0..=n_max {
            let w = lk.coeff(j);
            e += w * sums[j];
            s += w * w * sq_sums[j];
            estimate_prefix.push(e);
            sigma_sq_prefix.push(s);
        }
        Ok(WindowSums {
            h,
            sign,
            n: sample.len(),
            prefactor: lk.prefactor(),
            estimate_prefix,
            sigma_sq_prefix,
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    pub fn n_max(&self) -> usize {
        self.estimate_prefix.len() - 1
    }

    pub fn sample_size(&self) -> usize {
        self.n
    }

    /// `f̂_{h,N}(x0)`.
    pub fn estimate(&self, n_cut: usize) -> f64 {
        self.prefactor * self.estimate_prefix[n_cut] / self.n as f64
    }

    /// `σ̂²_{h,N}` (sum-of-squares form).
    pub fn sigma_sq(&self, n_cut: usize) -> f64 {
        self.prefactor * self.prefactor * self.sigma_sq_prefix[n_cut] / self.n as f64
    }
}

/// `f̂^{±}_{h,N}(x0) = (1/n) Σ_i L^{±}_{h,N}(Y_i - x0)`.
pub fn estimate_point(
    sample: &[f64],
    x0: f64,
    model: &ErrorModel,
    kernel: &SmoothKernel,
    tau: &TuningPair,
) -> Result<f64> {
    tau.validate()?;
    let sums = WindowSums::compute(sample, x0, model, kernel, tau.sign_at(x0), tau.h, tau.n_cut)?;
    Ok(sums.estimate(tau.n_cut))
}

/// `σ̂²_τ = (1/n) Σ_i c² Σ_j C_{j,m}² |K^{(r)}(a_ij)|²` with `c` the kernel prefactor.
pub fn empirical_sigma_sq(
    sample: &[f64],
    x0: f64,
    model: &ErrorModel,
    kernel: &SmoothKernel,
    tau: &TuningPair,
) -> Result<f64> {
    tau.validate()?;
    let sums = WindowSums::compute(sample, x0, model, kernel, tau.sign_at(x0), tau.h, tau.n_cut)?;
    Ok(sums.sigma_sq(tau.n_cut))
}

/// Envelope `u_τ`, twice a bound on `sup_t |L^{±}_{h,N}(t)|`.
///
/// Uniform family: `2^{m+1} θ^m C_{N,m} ‖K^{(m)}‖_∞ h^{-(m+1)}`.
/// Binomial family: `2^{m+1} C_{N,m} ‖K‖_∞ h^{-1}`.
pub fn envelope_u(model: &ErrorModel, kernel: &SmoothKernel, tau: &TuningPair) -> f64 {
    let m = model.multiplicity();
    let c = composition_coeff(tau.n_cut as u64, m);
    let sup = kernel.sup_norm(model.derivative_order() as usize);
    match *model {
        ErrorModel::UniformConv { theta, .. } => {
            2f64.powi(m as i32 + 1) * theta.powi(m as i32) * c * sup / tau.h.powi(m as i32 + 1)
        }
        ErrorModel::Binomial { .. } => 2f64.powi(m as i32 + 1) * c * sup / tau.h,
    }
}

/// `Λ_τ(κ) = σ √(2κ/n) + 2uκ/(3n)`.
pub fn threshold_lambda(sigma: f64, u: f64, kappa: f64, n: usize) -> f64 {
    let n = n as f64;
    sigma * (2.0 * kappa / n).sqrt() + 2.0 * u * kappa / (3.0 * n)
}

/// `Λ̂_τ(κ) = 7 Λ(σ̂, u, κ, n)`.
pub fn threshold_lambda_hat(sigma_hat: f64, u: f64, kappa: f64, n: usize) -> f64 {
    7.0 * threshold_lambda(sigma_hat, u, kappa, n)
}

fn window_options() -> QuadOptions {
    QuadOptions {
        abs_tol: 1e-12,
        rel_tol: 1e-9,
        max_intervals: 4_000,
    }
}

/// `σ²_τ = c² Σ_j C_{j,m}² ∫ |K^{(r)}((y - x0 - s_j)/h)|² f_Y(y) dy` by quadrature, window by
/// window.
pub fn true_sigma_sq<F: Fn(f64) -> f64>(
    model: &ErrorModel,
    kernel: &SmoothKernel,
    tau: &TuningPair,
    x0: f64,
    f_y: F,
) -> Result<f64> {
    tau.validate()?;
    let lk = DeconvKernel::new(model, kernel, tau.sign_at(x0), tau.h, tau.n_cut)?;
    let r = model.derivative_order() as usize;
    let h = tau.h;
    let mut total = 0.0;
    for (j, centre) in lk.window_centres().enumerate() {
        let w = lk.coeff(j);
        let integral = integrate(
            |u| kernel.eval(r, u).powi(2) * f_y(x0 + centre + h * u),
            -1.0,
            1.0,
            &[0.0],
            window_options(),
        )?;
        total += w * w * h * integral.value;
    }
    Ok(lk.prefactor().powi(2) * total)
}

/// `E L^{±}_{h,N}(Y - x0) = ∫ L^{±}_{h,N}(y - x0) f_Y(y) dy` by quadrature over each window.
pub fn expected_estimate<F: Fn(f64) -> f64>(
    model: &ErrorModel,
    kernel: &SmoothKernel,
    tau: &TuningPair,
    x0: f64,
    f_y: F,
) -> Result<f64> {
    tau.validate()?;
    let lk = DeconvKernel::new(model, kernel, tau.sign_at(x0), tau.h, tau.n_cut)?;
    let r = model.derivative_order() as usize;
    let h = tau.h;
    let mut total = 0.0;
    for (j, centre) in lk.window_centres().enumerate() {
        let integral = integrate(
            |u| kernel.eval(r, u) * f_y(x0 + centre + h * u),
            -1.0,
            1.0,
            &[0.0],
            window_options(),
        )?;
        total += lk.coeff(j) * h * integral.value;
    }
    Ok(lk.prefactor() * total)
}

/// `∫ K(y) f(x + yh) dy`, the kernel-smoothed density at `x`.
pub fn smoothed_density<F: Fn(f64) -> f64>(kernel: &SmoothKernel, f: F, x: f64, h: f64) -> Result<f64> {
    Ok(integrate(|u| kernel.eval(0, u) * f(x + h * u), -1.0, 1.0, &[0.0], window_options())?.value)
}

/// Truncation remainder `Σ_l w_l ∫K(y) f(x0 ± l·step + yh) dy` (see
/// [`remainder_weights`](crate::kernels::remainder_weights)).
pub fn truncation_remainder<F: Fn(f64) -> f64>(
    model: &ErrorModel,
    kernel: &SmoothKernel,
    tau: &TuningPair,
    x0: f64,
    f: F,
) -> Result<f64> {
    tau.validate()?;
    let step = tau.sign_at(x0).value() * remainder_step(model);
    remainder_weights(model, tau.n_cut)
        .into_iter()
        .map(|(l, w)| Ok(w * smoothed_density(kernel, &f, x0 + step * l as f64, tau.h)?))
        .sum()
}

/// Exact mean of the estimator for a target density `f`: smoothed density plus truncation
/// remainder.
pub fn exact_mean<F: Fn(f64) -> f64>(
    model: &ErrorModel,
    kernel: &SmoothKernel,
    tau: &TuningPair,
    x0: f64,
    f: F,
) -> Result<f64> {
    Ok(smoothed_density(kernel, &f, x0, tau.h)? + truncation_remainder(model, kernel, tau, x0, &f)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error_models::observation_density;
    use crate::kernels::{build_kernel, deconv_kernel_eval};
    use rand::Rng;
    use rand_distr::{Cauchy, Distribution};
    use std::f64::consts::PI;

    fn kernel() -> SmoothKernel {
        build_kernel(5).unwrap()
    }

    #[test]
    fn estimate_examples() {
        let k = kernel();
        let u1 = ErrorModel::uniform(1, 1.0).unwrap();
        let tau = TuningPair::new(0.4, 0).unwrap();
        assert!(estimate_point(&[1.3], 0.3, &u1, &k, &tau).unwrap().abs() < 1e-12);
        assert_eq!(estimate_point(&[-7.0], 0.3, &u1, &k, &tau).unwrap(), 0.0);
        assert!(estimate_point(&[], 0.3, &u1, &k, &tau).is_err());
        assert!(estimate_point(&[f64::NAN], 0.3, &u1, &k, &tau).is_err());
        assert!(TuningPair::new(0.0, 1).is_err());
    }

    #[test]
    fn binomial_term_by_term() {
        let k = kernel();
        let b1 = ErrorModel::binomial(1).unwrap();
        let tau = TuningPair::new(0.5, 1).unwrap();
        let x0 = 0.2;
        let sample = [x0 + 0.3, x0 + 1.0, x0 + 2.1];
        // + branch of m = 1: (2/h) Σ_j (-1)^j K((y - x0 - j - 1)/h)
        let mut expected = 0.0;
        for &y in &sample {
            for j in 0..=1 {
                let sign = if j == 0 { 1.0 } else { -1.0 };
                expected += sign * k.eval(0, (y - x0 - j as f64 - 1.0) / 0.5);
            }
        }
        expected *= 2.0 / 0.5 / sample.len() as f64;
        let got = estimate_point(&sample, x0, &b1, &k, &tau).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn sigma_single_term() {
        let k = kernel();
        let u2 = ErrorModel::uniform(2, 0.5).unwrap();
        let tau = TuningPair::new(0.2, 3).unwrap();
        let x0 = 0.4;
        // only window j = 1 (centre θ(2 + 2) = 2) is active
        let a = 0.35;
        let y = x0 + 2.0 + 0.2 * a;
        let got = empirical_sigma_sq(&[y], x0, &u2, &k, &tau).unwrap();
        let expected = 1.0 / 0.2f64.powi(6) * 2.0f64.powi(2) * k.eval(2, a).powi(2);
        assert!((got - expected).abs() < 1e-10 * expected);
        assert_eq!(empirical_sigma_sq(&[x0 + 50.0], x0, &u2, &k, &tau).unwrap(), 0.0);
    }

    #[test]
    fn envelope_examples() {
        let k = kernel();
        let u1 = ErrorModel::uniform(1, 1.0).unwrap();
        let tau = TuningPair::new(0.5, 7).unwrap();
        let u = envelope_u(&u1, &k, &tau);
        assert!((u - 16.0 * k.sup_norm(1)).abs() < 1e-12 * u);

        let mut rng = crate::rng::stream(4, "envelope", &[]);
        for model in [
            ErrorModel::uniform(2, 0.7).unwrap(),
            ErrorModel::uniform(3, 1.0).unwrap(),
            ErrorModel::binomial(2).unwrap(),
        ] {
            for sign in [Sign::Plus, Sign::Minus] {
                let tau = TuningPair::new(0.3, 6).unwrap().with_sign(sign);
                let u = envelope_u(&model, &k, &tau);
                for _ in 0..10_000 {
                    let t: f64 = rng.random_range(-20.0..20.0);
                    let l = deconv_kernel_eval(&model, &k, sign, 0.3, 6, t).unwrap();
                    assert!(2.0 * l.abs() <= u, "{model} t={t}");
                }
            }
            let small = envelope_u(&model, &k, &TuningPair::new(0.3, 5).unwrap());
            let doubled = envelope_u(&model, &k, &TuningPair::new(0.3, 10).unwrap());
            let m = model.multiplicity();
            let ratio = composition_coeff(10, m) / composition_coeff(5, m);
            assert!((doubled / small - ratio).abs() < 1e-12 * ratio);
        }
    }

    #[test]
    fn lambda_arithmetic() {
        assert!((threshold_lambda(1.0, 3.0, 2.0, 100) - 0.24).abs() < 1e-15);
        assert!((threshold_lambda_hat(1.0, 3.0, 2.0, 100) - 1.68).abs() < 1e-14);
        assert!((threshold_lambda(0.0, 3.0, 2.0, 100) - 0.04).abs() < 1e-15);
        assert!((threshold_lambda(1.0, 0.0, 2.0, 100) - 0.2).abs() < 1e-15);
        assert!((threshold_lambda_hat(0.0, 3.0, 2.0, 100) - 14.0 * 3.0 * 2.0 / 300.0).abs() < 1e-14);
    }

    #[test]
    fn true_sigma_closed_form() {
        let k = kernel();
        let u2 = ErrorModel::uniform(2, 0.5).unwrap();
        let tau = TuningPair::new(0.2, 0).unwrap();
        let c = 0.37;
        let got = true_sigma_sq(&u2, &k, &tau, 0.1, |_| c).unwrap();
        let expected = c * 1.0 / 0.2f64.powi(6) * 0.2 * k.l2_norm_sq(2).unwrap();
        assert!((got - expected).abs() < 1e-8 * expected);
        assert_eq!(true_sigma_sq(&u2, &k, &tau, 0.1, |_| 0.0).unwrap(), 0.0);
    }

    /// Density of standard Cauchy plus `U(-θ, θ)`.
    fn cauchy_uniform_density(theta: f64, y: f64) -> f64 {
        ((y + theta).atan() - (y - theta).atan()) / (2.0 * theta * PI)
    }

    #[test]
    fn empirical_sigma_converges() {
        let k = kernel();
        let model = ErrorModel::uniform(1, 1.0).unwrap();
        let tau = TuningPair::new(0.3, 5).unwrap();
        let x0 = 0.5;
        let n = 100_000;
        let mut rng = crate::rng::stream(21, "sigma-lln", &[]);
        let cauchy = Cauchy::new(0.0, 1.0).unwrap();
        let sample: Vec<f64> = (0..n).map(|_| cauchy.sample(&mut rng) + model.draw(&mut rng)).collect();
        let emp = empirical_sigma_sq(&sample, x0, &model, &k, &tau).unwrap();
        let exact = true_sigma_sq(&model, &k, &tau, x0, |y| cauchy_uniform_density(1.0, y)).unwrap();
        assert!((emp / exact - 1.0).abs() < 0.05, "{emp} vs {exact}");
    }

    fn gaussian(x: f64) -> f64 {
        (-0.5 * (x / 0.8).powi(2)).exp() / (0.8 * (2.0 * PI).sqrt())
    }

    #[test]
    fn mean_identity_by_quadrature() {
        let k = kernel();
        let opts = QuadOptions {
            abs_tol: 1e-14,
            rel_tol: 1e-13,
            max_intervals: 2000,
        };
        for model in [
            ErrorModel::uniform(1, 0.6).unwrap(),
            ErrorModel::uniform(2, 0.5).unwrap(),
            ErrorModel::uniform(3, 0.4).unwrap(),
            ErrorModel::binomial(1).unwrap(),
            ErrorModel::binomial(3).unwrap(),
        ] {
            for (x0, sign) in [(0.3, Sign::Plus), (-0.4, Sign::Minus), (-1.5, Sign::Plus)] {
                for n_cut in [0usize, 2, 5] {
                    let tau = TuningPair::new(0.25, n_cut).unwrap().with_sign(sign);
                    let fy = |y: f64| observation_density(&model, gaussian, y, &[], opts).unwrap();
                    let by_quadrature = expected_estimate(&model, &k, &tau, x0, fy).unwrap();
                    let exact = exact_mean(&model, &k, &tau, x0, gaussian).unwrap();
                    assert!(
                        (by_quadrature - exact).abs() < 1e-7,
                        "{model} x0={x0} N={n_cut}: {by_quadrature} vs {exact}"
                    );
                }
            }
        }
    }

    #[test]
    fn estimator_is_average_and_permutation_invariant() {
        let k = kernel();
        let model = ErrorModel::uniform(2, 0.5).unwrap();
        let tau = TuningPair::new(0.3, 4).unwrap();
        let mut rng = crate::rng::stream(8, "perm", &[]);
        let sample: Vec<f64> = (0..500).map(|_| rng.random_range(-1.0..6.0)).collect();
        let whole = estimate_point(&sample, 0.2, &model, &k, &tau).unwrap();
        let mut reversed = sample.clone();
        reversed.reverse();
        let rev = estimate_point(&reversed, 0.2, &model, &k, &tau).unwrap();
        assert!((whole - rev).abs() < 1e-10 * whole.abs().max(1.0));
        let (a, b) = sample.split_at(200);
        let ea = estimate_point(a, 0.2, &model, &k, &tau).unwrap();
        let eb = estimate_point(b, 0.2, &model, &k, &tau).unwrap();
        assert!((whole - (200.0 * ea + 300.0 * eb) / 500.0).abs() < 1e-10 * whole.abs().max(1.0));
        let direct: f64 = sample
            .iter()
            .map(|&y| deconv_kernel_eval(&model, &k, Sign::Plus, 0.3, 4, y - 0.2).unwrap())
            .sum::<f64>()
            / 500.0;
        assert!((whole - direct).abs() < 1e-10 * whole.abs().max(1.0));
    }

    #[test]
    fn window_sums_prefixes_are_independent_of_n_max() {
        let k = kernel();
        let model = ErrorModel::uniform(1, 1.0).unwrap();
        let mut rng = crate::rng::stream(9, "prefix", &[]);
        let sample: Vec<f64> = (0..300).map(|_| rng.random_range(-2.0..12.0)).collect();
        let wide = WindowSums::compute(&sample, 0.5, &model, &k, Sign::Plus, 0.4, 9).unwrap();
        for n_cut in 0..=9 {
            let tau = TuningPair::new(0.4, n_cut).unwrap();
            assert_eq!(wide.estimate(n_cut), estimate_point(&sample, 0.5, &model, &k, &tau).unwrap());
            assert_eq!(wide.sigma_sq(n_cut), empirical_sigma_sq(&sample, 0.5, &model, &k, &tau).unwrap());
        }
    }
}

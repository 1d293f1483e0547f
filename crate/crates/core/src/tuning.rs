//! Rate exponents, rate functions, oracle tuning parameters and the default adaptive grids.
//!
//! All logarithms are natural. The unspecified constants in the oracle tuning formulas are set
//! to one.

use serde::{Deserialize, Serialize};

use crate::error::{DeconvError, Result};
use crate::error_models::ErrorModel;
use crate::estimators::TuningPair;

/// Smoothness and tail parameters of a density class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassParams {
    /// Hölder smoothness.
    pub alpha: f64,
    /// Tail exponent.
    pub q: f64,
    /// Hölder constant.
    #[serde(rename = "A")]
    pub a: f64,
    /// Tail constant.
    #[serde(rename = "B")]
    pub b: f64,
}

impl ClassParams {
    pub fn new(alpha: f64, q: f64, a: f64, b: f64) -> Result<Self> {
        let p = ClassParams { alpha, q, a, b };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("q", self.q), ("A", self.a), ("B", self.b)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(DeconvError::invalid(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Tail regime relative to the boundary `q = 2m - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Light,
    Boundary,
    Heavy,
}

/// Classifies `q` against `2m - 1` (equality up to a relative `1e-12`).
pub fn regime(q: f64, m: u32) -> Regime {
    let edge = 2.0 * m as f64 - 1.0;
    if (q - edge).abs() <= 1e-12 * edge {
        Regime::Boundary
    } else if q > edge {
        Regime::Light
    } else {
        Regime::Heavy
    }
}

/// `(r, ν)` with `r = (α/q)(2m-1-q)` for `q < 2m-1` (else `0`) and `ν = α/(2α+2m+1+r)`.
pub fn rate_exponents(alpha: f64, q: f64, m: u32) -> (f64, f64) {
    let mf = m as f64;
    let r = match regime(q, m) {
        Regime::Heavy => alpha / q * (2.0 * mf - 1.0 - q),
        _ => 0.0,
    };
    (r, alpha / (2.0 * alpha + 2.0 * mf + 1.0 + r))
}

fn check_n(n: usize, min: usize) -> Result<()> {
    if n < min {
        return Err(DeconvError::invalid(format!("sample size must be at least {min}, got {n}")));
    }
    Ok(())
}

/// Upper-bound rate `φ(n)` of the estimator with oracle tuning.
pub fn rate_phi(n: usize, params: &ClassParams, m: u32) -> Result<f64> {
    check_n(n, 2)?;
    params.validate()?;
    let ClassParams { alpha, q, a, b } = *params;
    let (_, nu) = rate_exponents(alpha, q, m);
    let nf = n as f64;
    let a_part = a.powf((2.0 * m as f64 + 1.0) / alpha);
    Ok(match regime(q, m) {
        Regime::Light => (b.powf(1.0 / alpha) * a_part).powf(nu) * nf.powf(-nu),
        Regime::Boundary => (b.powf(1.0 / alpha) * a_part).powf(nu) * (nf.ln() / nf).powf(nu),
        Regime::Heavy => {
            (b.powf((2.0 * m as f64 - 1.0) / (alpha * q)) * a_part).powf(nu) * nf.powf(-nu)
        }
    })
}

/// `ψ_n = (A^{(2m+1)/α} / n)^{α/(2mα+2m+1)}`, the rate over a Hölder ball without tail control.
pub fn rate_holder(n: usize, alpha: f64, m: u32, a: f64) -> Result<f64> {
    check_n(n, 2)?;
    if !(alpha > 0.0 && a > 0.0) {
        return Err(DeconvError::invalid("alpha and A must be positive"));
    }
    let mf = m as f64;
    let exponent = alpha / (2.0 * mf * alpha + 2.0 * mf + 1.0);
    Ok((a.powf((2.0 * mf + 1.0) / alpha) / n as f64).powf(exponent))
}

/// Oracle `(h*, N*)` before rounding and clamping.
pub fn minimax_raw(n: usize, params: &ClassParams, m: u32) -> Result<(f64, f64)> {
    check_n(n, 2)?;
    params.validate()?;
    let ClassParams { alpha, q, a, b } = *params;
    let mf = m as f64;
    let nf = n as f64;
    let denom = 2.0 * alpha + 2.0 * mf + 1.0;
    Ok(match regime(q, m) {
        Regime::Light => {
            let h = (b / (a * a * nf)).powf(1.0 / denom);
            let big_n = (b.powf(alpha + 2.0 * mf + 1.0) * nf.powf(alpha) / a.powf(2.0 * mf + 1.0))
                .powf(1.0 / (q * denom));
            (h, big_n)
        }
        Regime::Boundary => {
            let h = (b * nf.ln() / (a * a * nf)).powf(1.0 / denom);
            let big_n = (b.powf(alpha + 2.0 * mf + 1.0) / a.powf(2.0 * mf + 1.0)
                * (nf / nf.ln()).powf(alpha))
            .powf(1.0 / (q * denom));
            (h, big_n)
        }
        Regime::Heavy => {
            let (r, _) = rate_exponents(alpha, q, m);
            let scale = b.powf((2.0 * mf - 1.0) / q) / a.powf((2.0 * mf + q - 1.0) / q) / nf;
            let h = scale.powf(1.0 / (denom + r));
            let big_n = (b / a).powf(1.0 / q) * h.powf(-alpha / q);
            (h, big_n)
        }
    })
}

/// Oracle tuning pair for the uniform family with half-width `theta`: `N*` rounded up (at least
/// one) and `h*` clamped to `(0, θ]`.
pub fn minimax_params(n: usize, params: &ClassParams, m: u32, theta: f64) -> Result<TuningPair> {
    if !(theta.is_finite() && theta > 0.0) {
        return Err(DeconvError::invalid(format!("theta must be positive, got {theta}")));
    }
    let (h, big_n) = minimax_raw(n, params, m)?;
    if !(h.is_finite() && h > 0.0 && big_n.is_finite()) {
        return Err(DeconvError::numeric(format!(
            "oracle tuning is not representable for n = {n}: h = {h}, N = {big_n}"
        )));
    }
    let n_cut = big_n.ceil().max(1.0);
    if n_cut > crate::kernels::MAX_CUTOFF as f64 {
        return Err(DeconvError::numeric(format!("oracle cut-off {n_cut} is too large")));
    }
    TuningPair::new(h.min(theta), n_cut as usize)
}

/// Oracle tuning for an error model. Only the uniform family has closed-form oracle tuning.
pub fn minimax_params_for(n: usize, params: &ClassParams, model: &ErrorModel) -> Result<TuningPair> {
    match *model {
        ErrorModel::UniformConv { m, theta } => minimax_params(n, params, m, theta),
        ErrorModel::Binomial { .. } => Err(DeconvError::invalid(
            "oracle tuning formulas are available for the uniform family only",
        )),
    }
}

/// Candidate bandwidths and cut-offs for adaptive selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    /// Bandwidths, descending.
    pub bandwidths: Vec<f64>,
    /// Cut-offs, ascending.
    pub cutoffs: Vec<usize>,
}

impl GridSpec {
    /// Builds a grid from arbitrary candidate lists; they are sorted and deduplicated.
    pub fn new(mut bandwidths: Vec<f64>, mut cutoffs: Vec<usize>) -> Result<Self> {
        if bandwidths.is_empty() || cutoffs.is_empty() {
            return Err(DeconvError::invalid("grid needs at least one bandwidth and one cut-off"));
        }
        if let Some(h) = bandwidths.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(DeconvError::invalid(format!("grid bandwidth must be positive, got {h}")));
        }
        bandwidths.sort_by(|a, b| b.total_cmp(a));
        bandwidths.dedup();
        cutoffs.sort_unstable();
        cutoffs.dedup();
        Ok(GridSpec {
            bandwidths,
            cutoffs,
        })
    }

    /// Re-validates and normalises a grid read from a file.
    pub fn normalized(&self) -> Result<Self> {
        GridSpec::new(self.bandwidths.clone(), self.cutoffs.clone())
    }

    pub fn len(&self) -> usize {
        self.bandwidths.len() * self.cutoffs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All `(h, N)` pairs, bandwidths outermost.
    pub fn points(&self) -> impl Iterator<Item = (f64, usize)> + '_ {
        self.bandwidths
            .iter()
            .flat_map(move |&h| self.cutoffs.iter().map(move |&n| (h, n)))
    }
}

/// `h_min = (ln n / n)^{1/(2m+1)}`.
pub fn min_bandwidth(n: usize, m: u32) -> f64 {
    let nf = n as f64;
    (nf.ln() / nf).powf(1.0 / (2.0 * m as f64 + 1.0))
}

/// `N_max = ⌊(n / ln n)^{1/(2m)}⌋`, at least one.
pub fn max_cutoff(n: usize, m: u32) -> usize {
    let nf = n as f64;
    ((nf / nf.ln()).powf(1.0 / (2.0 * m as f64)).floor() as usize).max(1)
}

/// Dyadic bandwidths `θ 2^{-j}`, `j = 0..=⌊log2(θ/h_min)⌋`, and cut-offs `1..=N_max`.
pub fn default_grids(n: usize, m: u32, theta: f64) -> Result<GridSpec> {
    check_n(n, 8)?;
    if !(theta.is_finite() && theta > 0.0) {
        return Err(DeconvError::invalid(format!("theta must be positive, got {theta}")));
    }
    let h_min = min_bandwidth(n, m);
    let levels = if theta > h_min {
        (theta / h_min).log2().floor() as i32
    } else {
        0
    };
    let bandwidths = (0..=levels).map(|j| theta * 0.5f64.powi(j)).collect();
    let cutoffs = (1..=max_cutoff(n, m)).collect();
    GridSpec::new(bandwidths, cutoffs)
}

/// Default grid for an error model; the binomial family uses `h_max = 1/2`, half the spacing of
/// its integer shifts.
pub fn default_grids_for(n: usize, model: &ErrorModel) -> Result<GridSpec> {
    default_grids(n, model.multiplicity(), model.shift_unit())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(alpha: f64, q: f64) -> ClassParams {
        ClassParams::new(alpha, q, 1.0, 1.0).unwrap()
    }

    #[test]
    fn exponent_examples() {
        let (r, nu) = rate_exponents(2.0, 4.0, 1);
        assert_eq!(r, 0.0);
        assert!((nu - 2.0 / 7.0).abs() < 1e-15);
        let (r, nu) = rate_exponents(1.0, 1.0, 2);
        assert!((r - 2.0).abs() < 1e-15);
        assert!((nu - 1.0 / 9.0).abs() < 1e-15);
        let (r, nu) = rate_exponents(1.0, 3.0, 2);
        assert_eq!(r, 0.0);
        assert!((nu - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn regime_continuity() {
        let boundary = 1.5 / (3.0 + 4.0 + 1.0);
        for eps in [1e-3, 1e-6, 1e-9] {
            let (_, above) = rate_exponents(1.5, 3.0 + eps, 2);
            let (_, below) = rate_exponents(1.5, 3.0 - eps, 2);
            assert!((above - boundary).abs() < 10.0 * eps);
            assert!((below - boundary).abs() < 10.0 * eps);
        }
    }

    #[test]
    fn phi_examples() {
        let n = 10_000;
        let (_, nu) = rate_exponents(2.0, 4.0, 1);
        let phi = rate_phi(n, &params(2.0, 4.0), 1).unwrap();
        assert!((phi - (n as f64).powf(-nu)).abs() < 1e-15);

        let (_, nu) = rate_exponents(1.0, 3.0, 2);
        let phi = rate_phi(n, &params(1.0, 3.0), 2).unwrap();
        let nf = n as f64;
        assert!((phi - (nf.ln() / nf).powf(nu)).abs() < 1e-15);

        let scaled = rate_phi(n, &ClassParams::new(2.0, 4.0, 3.0, 1.0).unwrap(), 1).unwrap();
        let base = rate_phi(n, &params(2.0, 4.0), 1).unwrap();
        let (_, nu) = rate_exponents(2.0, 4.0, 1);
        assert!((scaled / base - 3f64.powf(3.0 * nu / 2.0)).abs() < 1e-12);

        for p in [params(2.0, 4.0), params(1.0, 1.0)] {
            let m = if p.q == 4.0 { 1 } else { 2 };
            let (_, nu) = rate_exponents(p.alpha, p.q, m);
            let n = 1usize << 40;
            let ratio = rate_phi(n, &p, m).unwrap() / rate_phi(2 * n, &p, m).unwrap();
            assert!((ratio - 2f64.powf(nu)).abs() < 1e-12, "{p:?}");
        }
        // on the boundary the log factor makes the convergence slow but monotone
        let p = params(1.5, 3.0);
        let (_, nu) = rate_exponents(1.5, 3.0, 2);
        let gap = |k: u32| {
            let n = 1usize << k;
            let ratio = rate_phi(n, &p, 2).unwrap() / rate_phi(2 * n, &p, 2).unwrap();
            (ratio - 2f64.powf(nu)).abs()
        };
        assert!(gap(20) > gap(40) && gap(40) > gap(60) && gap(60) < 4e-3);
        assert!(rate_phi(1, &params(1.0, 1.0), 1).is_err());
    }

    #[test]
    fn holder_rate() {
        let r = rate_holder(1000, 1.0, 1, 1.0).unwrap();
        assert!((r - 1000f64.powf(-0.2)).abs() < 1e-15);
        let mut prev = f64::INFINITY;
        for k in 3..20 {
            let n = 1usize << k;
            let v = rate_holder(n, 2.0, 1, 1.0).unwrap();
            assert!(v < prev);
            prev = v;
        }
        let n = 1usize << 30;
        assert!(rate_holder(n, 2.0, 2, 1.0).unwrap() > rate_phi(n, &params(2.0, 4.0), 2).unwrap());
        // for m = 1 the two exponents coincide
        let (_, nu) = rate_exponents(2.0, 4.0, 1);
        assert!((rate_holder(n, 2.0, 1, 1.0).unwrap() - (n as f64).powf(-nu)).abs() < 1e-15);
    }

    #[test]
    fn minimax_examples() {
        let tau = minimax_params(10_000, &params(1.0, 4.0), 1, 1.0).unwrap();
        assert!((tau.h - 10_000f64.powf(-0.2)).abs() < 1e-12);
        assert!((tau.h - 0.1585).abs() < 1e-4);
        // N* = (n^α)^{1/(q(2α+3))} = 10^{4/20}, rounded up
        assert_eq!(tau.n_cut, 2);

        let (h, big_n) = minimax_raw(50_000, &params(1.0, 1.0), 2).unwrap();
        assert!((big_n - h.powf(-1.0)).abs() < 1e-9 * big_n);

        let tiny = minimax_params(2, &params(1.0, 4.0), 1, 0.25).unwrap();
        assert_eq!(tiny.h, 0.25);
        assert!(tiny.n_cut >= 1);

        let b = ErrorModel::binomial(2).unwrap();
        assert!(minimax_params_for(1000, &params(1.0, 4.0), &b).is_err());
    }

    #[test]
    fn minimax_balances_bias_and_variance() {
        for (p, m) in [(params(2.0, 4.0), 1), (params(1.0, 1.0), 2), (params(1.5, 1.5), 3)] {
            for k in 3..=6 {
                let n = 10usize.pow(k);
                let (h, big_n) = minimax_raw(n, &p, m).unwrap();
                let n_cut = big_n.ceil().max(1.0);
                let psi = match regime(p.q, m) {
                    Regime::Light => 1.0,
                    Regime::Boundary => n_cut.ln(),
                    Regime::Heavy => n_cut.powf(2.0 * m as f64 - p.q - 1.0),
                };
                let bias = h.powf(p.alpha);
                let stochastic = (psi / (n as f64 * h.powi(2 * m as i32 + 1))).sqrt();
                let ratio = bias / stochastic;
                assert!((0.25..=4.0).contains(&ratio), "{p:?} m={m} n={n}: {ratio}");
            }
        }
    }

    #[test]
    fn grid_examples() {
        let g = default_grids(1024, 1, 1.0).unwrap();
        let h_min = (1024f64.ln() / 1024.0).cbrt();
        assert!((min_bandwidth(1024, 1) - h_min).abs() < 1e-15);
        assert!((h_min - 0.1889).abs() < 1e-3);
        assert_eq!(g.bandwidths, vec![1.0, 0.5, 0.25]);
        assert_eq!(g.cutoffs, (1..=12).collect::<Vec<_>>());

        // halving θ halves each bandwidth; levels below h_min are dropped
        let half = default_grids(1024, 1, 0.5).unwrap();
        assert_eq!(half.bandwidths, vec![0.5, 0.25]);
        for (a, b) in half.bandwidths.iter().zip(&g.bandwidths) {
            assert_eq!(*a, 0.5 * b);
        }

        for n in [8usize, 100, 4096, 1 << 20] {
            for m in 1..4 {
                let g = default_grids(n, m, 1.0).unwrap();
                let h_min = min_bandwidth(n, m);
                let levels = (1.0 / h_min).log2().floor() as usize;
                assert_eq!(g.bandwidths.len(), levels + 1);
                assert!(h_min <= *g.bandwidths.last().unwrap());
            }
        }
        let g = default_grids(4096, 1, 1.0).unwrap();
        assert_eq!((g.bandwidths.len(), g.cutoffs.len()), (3, 22));
        assert!(default_grids(7, 1, 1.0).is_err());
    }

    #[test]
    fn grid_normalisation() {
        let g = GridSpec::new(vec![0.25, 1.0, 0.5, 0.5], vec![3, 1, 3, 2]).unwrap();
        assert_eq!(g.bandwidths, vec![1.0, 0.5, 0.25]);
        assert_eq!(g.cutoffs, vec![1, 2, 3]);
        assert_eq!(g.len(), 9);
        assert!(GridSpec::new(vec![], vec![1]).is_err());
        assert!(GridSpec::new(vec![-1.0], vec![1]).is_err());
    }
}

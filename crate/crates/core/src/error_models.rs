//! Measurement-error laws whose characteristic function vanishes on the imaginary axis.
//!
//! Two families are supported:
//!
//! * `UniformConv { m, theta }`: the m-fold convolution of `U(-theta, theta)`, with Laplace
//!   transform `[sinh(theta z) / (theta z)]^m` and zeros of multiplicity `m` at `i pi j / theta`.
//! * `Binomial { m }`: `Bin(m, 1/2)`, with transform `2^{-m} (1 + e^z)^m` and zeros at odd
//!   multiples of `i pi`.
//!
//! The textual form accepted by the CLI and configuration files is
//! `uniform:m=<int>,theta=<float>` or `binomial:m=<int>`.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DeconvError, Result};
use crate::quadrature::{integrate, QuadOptions};
use crate::rng;

/// Largest zero multiplicity supported; bounded by the kernel derivative order.
pub const MAX_MULTIPLICITY: u32 = 12;

/// Crossover above which weak-composition counts leave exact integer arithmetic.
const EXACT_BINOMIAL_LIMIT: u64 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ErrorModel {
    #[serde(rename = "uniform")]
    UniformConv { m: u32, theta: f64 },
    Binomial { m: u32 },
}

impl ErrorModel {
    pub fn uniform(m: u32, theta: f64) -> Result<Self> {
        let model = ErrorModel::UniformConv { m, theta };
        model.validate()?;
        Ok(model)
    }

    pub fn binomial(m: u32) -> Result<Self> {
        let model = ErrorModel::Binomial { m };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.multiplicity();
        if m == 0 || m > MAX_MULTIPLICITY {
            return Err(DeconvError::invalid(format!(
                "multiplicity m must lie in 1..={MAX_MULTIPLICITY}, got {m}"
            )));
        }
        if let ErrorModel::UniformConv { theta, .. } = self {
            if !(theta.is_finite() && *theta > 0.0) {
                return Err(DeconvError::invalid(format!(
                    "theta must be positive and finite, got {theta}"
                )));
            }
        }
        Ok(())
    }

    pub fn multiplicity(&self) -> u32 {
        match *self {
            ErrorModel::UniformConv { m, .. } | ErrorModel::Binomial { m } => m,
        }
    }

    /// Spacing unit of the kernel shifts: `theta` for the uniform family, `1/2` for the binomial
    /// one (whose shifts are the integers, i.e. `2 * 1/2` apart).
    pub fn shift_unit(&self) -> f64 {
        match *self {
            ErrorModel::UniformConv { theta, .. } => theta,
            ErrorModel::Binomial { .. } => 0.5,
        }
    }

    /// Order of the kernel derivative entering the deconvolution kernel.
    pub fn derivative_order(&self) -> u32 {
        match *self {
            ErrorModel::UniformConv { m, .. } => m,
            ErrorModel::Binomial { .. } => 0,
        }
    }

    /// Location of the `j`-th kernel shift for the `+` branch.
    pub fn shift(&self, j: usize) -> f64 {
        match *self {
            ErrorModel::UniformConv { m, theta } => theta * (2.0 * j as f64 + m as f64),
            ErrorModel::Binomial { m } => (j + m as usize) as f64,
        }
    }

    /// Support of the error density.
    pub fn support(&self) -> (f64, f64) {
        match *self {
            ErrorModel::UniformConv { m, theta } => (-(m as f64) * theta, m as f64 * theta),
            ErrorModel::Binomial { m } => (0.0, m as f64),
        }
    }

    /// Density of a `UniformConv` error (scaled Irwin–Hall). `None` for the discrete binomial law.
    pub fn density(&self, e: f64) -> Option<f64> {
        match *self {
            ErrorModel::UniformConv { m, theta } => {
                Some(irwin_hall_density(m, (e + m as f64 * theta) / (2.0 * theta)) / (2.0 * theta))
            }
            ErrorModel::Binomial { .. } => None,
        }
    }

    /// Atoms `(location, mass)` of the binomial law. Empty for the continuous family.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match *self {
            ErrorModel::UniformConv { .. } => Vec::new(),
            ErrorModel::Binomial { m } => {
                let scale = 0.5f64.powi(m as i32);
                (0..=m)
                    .map(|k| (k as f64, binomial(m as u64, k as u64) * scale))
                    .collect()
            }
        }
    }

    /// Points where the error density changes polynomial piece (uniform family).
    pub fn density_breakpoints(&self) -> Vec<f64> {
        match *self {
            ErrorModel::UniformConv { m, theta } => (0..=m)
                .map(|k| -(m as f64) * theta + 2.0 * theta * k as f64)
                .collect(),
            ErrorModel::Binomial { m } => (0..=m).map(|k| k as f64).collect(),
        }
    }

    /// Draws one error using `rng`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            ErrorModel::UniformConv { m, theta } => (0..m)
                .map(|_| rng.random_range(-theta..=theta))
                .sum(),
            ErrorModel::Binomial { m } => (0..m).filter(|_| rng.random_bool(0.5)).count() as f64,
        }
    }
}

impl fmt::Display for ErrorModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorModel::UniformConv { m, theta } => write!(f, "uniform:m={m},theta={theta}"),
            ErrorModel::Binomial { m } => write!(f, "binomial:m={m}"),
        }
    }
}

impl FromStr for ErrorModel {
    type Err = DeconvError;

    fn from_str(s: &str) -> Result<Self> {
        let (family, params) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| DeconvError::Parse(format!("expected <family>:<params>, got {s:?}")))?;
        let mut m: Option<u32> = None;
        let mut theta: Option<f64> = None;
        for item in params.split(',') {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| DeconvError::Parse(format!("expected key=value, got {item:?}")))?;
            match (family, key) {
                (_, "m") if m.is_none() => {
                    m = Some(value.parse().map_err(|_| {
                        DeconvError::Parse(format!("m must be a positive integer, got {value:?}"))
                    })?)
                }
                ("uniform", "theta") if theta.is_none() => {
                    theta = Some(value.parse().map_err(|_| {
                        DeconvError::Parse(format!("theta must be a number, got {value:?}"))
                    })?)
                }
                _ => {
                    return Err(DeconvError::Parse(format!(
                        "unexpected or repeated key {key:?} for error family {family:?}"
                    )))
                }
            }
        }
        let m = m.ok_or_else(|| DeconvError::Parse("missing key m".into()))?;
        match family {
            "uniform" => {
                let theta = theta.ok_or_else(|| DeconvError::Parse("missing key theta".into()))?;
                ErrorModel::uniform(m, theta)
            }
            "binomial" => ErrorModel::binomial(m),
            other => Err(DeconvError::Parse(format!("unknown error family {other:?}"))),
        }
    }
}

/// Laplace transform `phi_g(z) = E exp(-z eps)`; on the imaginary axis this is the
/// characteristic function at `omega = Im z`.
pub fn char_fn(model: &ErrorModel, z: Complex64) -> Result<Complex64> {
    if !(z.re.is_finite() && z.im.is_finite()) {
        return Err(DeconvError::invalid(format!("char_fn argument must be finite, got {z}")));
    }
    let m = model.multiplicity() as i32;
    let value = match *model {
        ErrorModel::UniformConv { theta, .. } => {
            let w = z * theta;
            let ratio = if w.norm() < 1e-4 {
                let w2 = w * w;
                Complex64::new(1.0, 0.0) + w2 / 6.0 + w2 * w2 / 120.0
            } else {
                w.sinh() / w
            };
            ratio.powi(m)
        }
        ErrorModel::Binomial { .. } => ((Complex64::new(1.0, 0.0) + z.exp()) * 0.5).powi(m),
    };
    Ok(value)
}

/// `C_{j,m} = binom(j + m - 1, m - 1)`, the number of weak compositions of `j` into `m` parts.
pub fn composition_coeff(j: u64, m: u32) -> f64 {
    assert!(m >= 1, "composition_coeff needs m >= 1");
    let n = j + m as u64 - 1;
    let k = m as u64 - 1;
    if n <= EXACT_BINOMIAL_LIMIT {
        return binomial_exact(n, k) as f64;
    }
    let k = k.min(n - k);
    if k <= 64 {
        // floating product: k roundings, relative error ~ k * eps
        (1..=k).fold(1.0, |acc, i| acc * (n - k + i) as f64 / i as f64)
    } else {
        use statrs::function::gamma::ln_gamma;
        (ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)).exp()
    }
}

fn binomial_exact(n: u64, k: u64) -> u128 {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 1..=k as u128 {
        acc = acc * (n as u128 - k as u128 + i) / i;
    }
    acc
}

pub(crate) fn binomial(n: u64, k: u64) -> f64 {
    if k > n {
        return 0.0;
    }
    if n <= EXACT_BINOMIAL_LIMIT {
        binomial_exact(n, k) as f64
    } else {
        composition_coeff(k, (n - k + 1) as u32)
    }
}

/// Density of the sum of `m` independent `U(0, 1)` variables.
pub fn irwin_hall_density(m: u32, x: f64) -> f64 {
    let mf = m as f64;
    if !(x > 0.0 && x < mf) {
        return 0.0;
    }
    if m == 1 {
        return 1.0;
    }
    // use the symmetric half to limit cancellation in the alternating sum
    let x = if x > 0.5 * mf { mf - x } else { x };
    let mut fact = 1.0;
    for i in 1..m {
        fact *= i as f64;
    }
    let mut sum = 0.0;
    for k in 0..=(x.floor() as u64).min(m as u64) {
        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
        sum += sign * binomial(m as u64, k) * (x - k as f64).powi(m as i32 - 1);
    }
    (sum / fact).max(0.0)
}

/// `n` i.i.d. errors from `model`, deterministic in `seed`.
pub fn sample_errors(model: &ErrorModel, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, "errors", &[]);
    (0..n).map(|_| model.draw(&mut rng)).collect()
}

/// Density of `Y = X + e` at `y` when `X` has density `f`: `∫ g(e) f(y - e) de` for the uniform
/// family (by quadrature, splitting at the density knots and at `y - b` for every `b` in
/// `f_breakpoints`) and `Σ_k P(e = k) f(y - k)` for the binomial family.
pub fn observation_density<F: Fn(f64) -> f64>(
    model: &ErrorModel,
    f: F,
    y: f64,
    f_breakpoints: &[f64],
    opts: QuadOptions,
) -> Result<f64> {
    match *model {
        ErrorModel::UniformConv { .. } => {
            let (lo, hi) = model.support();
            let mut breaks = model.density_breakpoints();
            breaks.extend(f_breakpoints.iter().map(|b| y - b));
            let density = |e: f64| model.density(e).unwrap_or(0.0) * f(y - e);
            Ok(integrate(density, lo, hi, &breaks, opts)?.value)
        }
        ErrorModel::Binomial { .. } => Ok(model.atoms().iter().map(|&(k, p)| p * f(y - k)).sum()),
    }
}

/// First `count` positive frequencies where the characteristic function vanishes.
pub fn imaginary_zeros(model: &ErrorModel, count: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    (1..=count)
        .map(|j| match *model {
            ErrorModel::UniformConv { theta, .. } => PI * j as f64 / theta,
            ErrorModel::Binomial { .. } => (2.0 * j as f64 - 1.0) * PI,
        })
        .collect()
}

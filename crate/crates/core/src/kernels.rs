//! Smooth compactly supported kernels and the truncated deconvolution kernels built from them.
//!
//! The base kernel is `K(t) = p(t) b(t)` with the bump `b(t) = exp(-1/(1 - t^2))` on `(-1, 1)`
//! and an even polynomial `p` fixed by the moment conditions. Derivatives are closed form:
//! `b^{(r)}(t) = Q_r(t) (1 - t^2)^{-2r} b(t)` with integer polynomials
//! `Q_{r+1} = (1 - t^2)^2 Q_r' + 4 r t (1 - t^2) Q_r - 2 t Q_r`, so every `K^{(r)}` reduces to a
//! single polynomial `P_r` times `(1 - t^2)^{-2r} b(t)`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DeconvError, Result};
use crate::error_models::{composition_coeff, ErrorModel};
use crate::quadrature::{integrate, QuadOptions};

/// Highest derivative order the kernel supports.
pub const MAX_DERIVATIVE: usize = 12;
/// Highest number of vanishing moments accepted by [`build_kernel`].
pub const MAX_ORDER: u32 = 12;
/// Kernel order used when none is configured.
pub const DEFAULT_ORDER: u32 = 5;

const SUP_GRID: usize = 4096;

/// Branch of the deconvolution kernel: shifts to the right (`Plus`) or to the left (`Minus`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Plus,
    Minus,
}

impl Sign {
    /// Branch used at `x0`: `+` for `x0 >= 0`, `-` otherwise.
    pub fn for_point(x0: f64) -> Sign {
        if x0 >= 0.0 {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

/// Infinitely differentiable kernel on `[-1, 1]` with `order` vanishing moments.
#[derive(Debug)]
pub struct SmoothKernel {
    order: u32,
    /// coefficients of `p` in powers of `t^2`
    poly_coeffs: Vec<f64>,
    /// `derivs[r]`: ascending coefficients of `P_r`
    derivs: Vec<Vec<f64>>,
    sup_norms: [OnceLock<f64>; MAX_DERIVATIVE + 1],
}

impl SmoothKernel {
    pub fn order(&self) -> u32 {
        self.order
    }

    /// Coefficients of the even polynomial factor in powers of `t^2`.
    pub fn poly_coeffs(&self) -> &[f64] {
        &self.poly_coeffs
    }

    /// `K^{(r)}(t)`, zero outside `(-1, 1)`.
    #[inline]
    pub fn eval(&self, r: usize, t: f64) -> f64 {
        if !(t > -1.0 && t < 1.0) {
            return 0.0;
        }
        let s = (1.0 - t) * (1.0 + t);
        let log_weight = -1.0 / s - 2.0 * r as f64 * s.ln();
        if log_weight < -745.0 {
            return 0.0;
        }
        horner(&self.derivs[r], t) * log_weight.exp()
    }

    /// `K^{(r)}(t)` with the derivative order checked.
    pub fn try_eval(&self, r: usize, t: f64) -> Result<f64> {
        if r > MAX_DERIVATIVE {
            return Err(DeconvError::invalid(format!(
                "derivative order {r} exceeds the supported maximum {MAX_DERIVATIVE}"
            )));
        }
        if !t.is_finite() {
            return Err(DeconvError::invalid(format!("kernel argument must be finite, got {t}")));
        }
        Ok(self.eval(r, t))
    }

    /// `sup_t |K^{(r)}(t)|`, computed once per order.
    pub fn sup_norm(&self, r: usize) -> f64 {
        assert!(r <= MAX_DERIVATIVE, "derivative order {r} out of range");
        *self.sup_norms[r].get_or_init(|| self.sup_norm_refined(r).1)
    }

    /// `(grid maximum, refined maximum)` of `|K^{(r)}|`.
    pub fn sup_norm_refined(&self, r: usize) -> (f64, f64) {
        let step = 2.0 / (SUP_GRID - 1) as f64;
        let values: Vec<f64> = (0..SUP_GRID)
            .map(|i| self.eval(r, -1.0 + step * i as f64).abs())
            .collect();
        let grid_max = values.iter().cloned().fold(0.0, f64::max);
        // refine every local maximum within 10% of the grid maximum
        let mut best = grid_max;
        for i in 1..SUP_GRID - 1 {
            if values[i] >= values[i - 1] && values[i] >= values[i + 1] && values[i] > 0.9 * grid_max {
                let lo = -1.0 + step * (i - 1) as f64;
                let hi = -1.0 + step * (i + 1) as f64;
                best = best.max(golden_section_max(|t| self.eval(r, t).abs(), lo, hi));
            }
        }
        (grid_max, best)
    }

    /// `int |K^{(r)}(t)|^2 dt`.
    pub fn l2_norm_sq(&self, r: usize) -> Result<f64> {
        Ok(integrate(
            |t| self.eval(r, t).powi(2),
            -1.0,
            1.0,
            &[0.0],
            QuadOptions::with_rel(1e-12),
        )?
        .value)
    }

    /// `int |K(t)| dt`.
    pub fn l1_norm(&self) -> Result<f64> {
        Ok(integrate(
            |t| self.eval(0, t).abs(),
            -1.0,
            1.0,
            &[0.0],
            QuadOptions::with_rel(1e-12),
        )?
        .value)
    }
}

fn horner(coeffs: &[f64], t: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * t + c)
}

fn golden_section_max<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    let ratio = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - ratio * (hi - lo);
    let mut x2 = lo + ratio * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..80 {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + ratio * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - ratio * (hi - lo);
            f1 = f(x1);
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    f1.max(f2)
}

fn bump(t: f64) -> f64 {
    if t > -1.0 && t < 1.0 {
        (-1.0 / ((1.0 - t) * (1.0 + t))).exp()
    } else {
        0.0
    }
}

/// Integer polynomials `Q_r`, `r = 0..=max`, with `b^{(r)} = Q_r (1-t^2)^{-2r} b`.
fn bump_derivative_polys(max: usize) -> Vec<Vec<i128>> {
    let mut out: Vec<Vec<i128>> = vec![vec![1]];
    for r in 0..max {
        let q = &out[r];
        let deriv: Vec<i128> = q.iter().enumerate().skip(1).map(|(i, &c)| i as i128 * c).collect();
        let mut next = vec![0i128; q.len() + 4];
        // (1 - 2t^2 + t^4) Q'
        for (i, &c) in deriv.iter().enumerate() {
            next[i] += c;
            next[i + 2] -= 2 * c;
            next[i + 4] += c;
        }
        // 4 r (t - t^3) Q - 2 t Q
        for (i, &c) in q.iter().enumerate() {
            next[i + 1] += (4 * r as i128 - 2) * c;
            next[i + 3] -= 4 * r as i128 * c;
        }
        while next.len() > 1 && *next.last().unwrap() == 0 {
            next.pop();
        }
        out.push(next);
    }
    out
}

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_add_scaled(acc: &mut Vec<f64>, p: &[f64], scale: f64) {
    if acc.len() < p.len() {
        acc.resize(p.len(), 0.0);
    }
    for (a, &c) in acc.iter_mut().zip(p) {
        *a += scale * c;
    }
}

fn poly_derivative(p: &[f64]) -> Vec<f64> {
    if p.len() <= 1 {
        return vec![0.0];
    }
    p.iter().enumerate().skip(1).map(|(i, &c)| i as f64 * c).collect()
}

/// Builds the kernel with `k` vanishing moments (`1 <= k <= 12`).
///
/// The even factor `p` has degree `2 floor(k/2)` and solves
/// `int t^{2j} p(t) b(t) dt = delta_{j0}` for `j = 0..=floor(k/2)`; odd moments vanish by symmetry.
pub fn build_kernel(k: u32) -> Result<SmoothKernel> {
    if k == 0 || k > MAX_ORDER {
        return Err(DeconvError::invalid(format!(
            "kernel order must lie in 1..={MAX_ORDER}, got {k}"
        )));
    }
    let d = (k / 2) as usize;
    let moments: Vec<f64> = (0..=2 * d)
        .map(|i| {
            integrate(
                |t| t.powi(2 * i as i32) * bump(t),
                -1.0,
                1.0,
                &[0.0],
                QuadOptions {
                    abs_tol: 1e-16,
                    rel_tol: 1e-13,
                    max_intervals: 20_000,
                },
            )
            .map(|r| r.value)
        })
        .collect::<Result<_>>()?;
    let system = DMatrix::from_fn(d + 1, d + 1, |j, i| moments[i + j]);
    let mut rhs = DVector::zeros(d + 1);
    rhs[0] = 1.0;
    let coeffs = system
        .lu()
        .solve(&rhs)
        .expect("moment system is nonsingular for every supported order");
    let poly_coeffs: Vec<f64> = coeffs.iter().copied().collect();

    // p in plain ascending powers of t
    let mut p = vec![0.0; 2 * d + 1];
    for (i, &c) in poly_coeffs.iter().enumerate() {
        p[2 * i] = c;
    }
    let q_int = bump_derivative_polys(MAX_DERIVATIVE);
    let q: Vec<Vec<f64>> = q_int.iter().map(|v| v.iter().map(|&c| c as f64).collect()).collect();
    let s_sq = [1.0, 0.0, -2.0, 0.0, 1.0]; // (1 - t^2)^2

    let mut p_derivs = vec![p.clone()];
    for r in 1..=MAX_DERIVATIVE {
        let next = poly_derivative(&p_derivs[r - 1]);
        p_derivs.push(next);
    }

    let mut derivs = Vec::with_capacity(MAX_DERIVATIVE + 1);
    for r in 0..=MAX_DERIVATIVE {
        // P_r = sum_rho binom(r, rho) p^{(r - rho)} Q_rho (1 - t^2)^{2 (r - rho)}
        let mut acc = vec![0.0];
        for rho in 0..=r {
            let mut term = poly_mul(&p_derivs[r - rho], &q[rho]);
            for _ in 0..(r - rho) {
                term = poly_mul(&term, &s_sq);
            }
            poly_add_scaled(&mut acc, &term, crate::error_models::binomial(r as u64, rho as u64));
        }
        derivs.push(acc);
    }

    Ok(SmoothKernel {
        order: k,
        poly_coeffs,
        derivs,
        sup_norms: Default::default(),
    })
}

/// `K^{(r)}(t)` (checked).
pub fn kernel_eval(kernel: &SmoothKernel, r: usize, t: f64) -> Result<f64> {
    kernel.try_eval(r, t)
}

pub fn kernel_sup_norm(kernel: &SmoothKernel, r: usize) -> Result<f64> {
    if r > MAX_DERIVATIVE {
        return Err(DeconvError::invalid(format!(
            "derivative order {r} exceeds the supported maximum {MAX_DERIVATIVE}"
        )));
    }
    Ok(kernel.sup_norm(r))
}

/// Largest series cut-off accepted by [`DeconvKernel::new`].
pub const MAX_CUTOFF: usize = 1 << 24;

/// Truncated deconvolution kernel `L^{sign}_{h,N}` for a fixed error model.
///
/// Uniform family: `(±2θ)^m h^{-(m+1)} Σ_{j≤N} C_{j,m} K^{(m)}((t ∓ θ(2j+m))/h)`.
///
/// Binomial family: `2^m h^{-1} Σ_{j≤N} (-1)^j C_{j,m} K((t - j - m)/h)` on the `+` branch and
/// `2^m h^{-1} Σ_{j≤N} (-1)^j C_{j,m} K((t + j)/h)` on the `-` branch. These are the series
/// expansions of `2^m (1 + e^z)^{-m}`; in both families the `+` branch starts at the right end of
/// the error support and the `-` branch at the left end.
#[derive(Debug, Clone)]
pub struct DeconvKernel<'a> {
    kernel: &'a SmoothKernel,
    sign: Sign,
    h: f64,
    n_cut: usize,
    order: usize,
    offset: f64,
    spacing: f64,
    prefactor: f64,
    coeffs: Vec<f64>,
}

impl<'a> DeconvKernel<'a> {
    pub fn new(
        model: &ErrorModel,
        kernel: &'a SmoothKernel,
        sign: Sign,
        h: f64,
        n_cut: usize,
    ) -> Result<Self> {
        if !(h.is_finite() && h > 0.0) {
            return Err(DeconvError::invalid(format!("bandwidth must be positive, got {h}")));
        }
        if n_cut > MAX_CUTOFF {
            return Err(DeconvError::invalid(format!(
                "series cut-off {n_cut} exceeds the supported maximum {MAX_CUTOFF}"
            )));
        }
        model.validate()?;
        let m = model.multiplicity();
        let (offset, spacing, prefactor, alternating) = match *model {
            ErrorModel::UniformConv { m, theta } => (
                m as f64 * theta,
                2.0 * theta,
                (sign.value() * 2.0 * theta).powi(m as i32) / h.powi(m as i32 + 1),
                false,
            ),
            ErrorModel::Binomial { m } => {
                let offset = match sign {
                    Sign::Plus => m as f64,
                    Sign::Minus => 0.0,
                };
                (offset, 1.0, 2f64.powi(m as i32) / h, true)
            }
        };
        let coeffs = (0..=n_cut)
            .map(|j| {
                let c = composition_coeff(j as u64, m);
                if alternating && j % 2 == 1 {
                    -c
                } else {
                    c
                }
            })
            .collect();
        Ok(DeconvKernel {
            kernel,
            sign,
            h,
            n_cut,
            order: model.derivative_order() as usize,
            offset,
            spacing,
            prefactor,
            coeffs,
        })
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn n_cut(&self) -> usize {
        self.n_cut
    }

    pub fn sign(&self) -> Sign {
        self.sign
    }

    /// Common factor `(±2θ)^m h^{-(m+1)}` (uniform) or `2^m h^{-1}` (binomial).
    pub fn prefactor(&self) -> f64 {
        self.prefactor
    }

    /// Signed series weight of term `j` (`C_{j,m}`, alternating for the binomial family).
    pub fn coeff(&self, j: usize) -> f64 {
        self.coeffs[j]
    }

    /// Range of series indices whose kernel window can contain `t`.
    #[inline]
    pub fn active_range(&self, t: f64) -> std::ops::RangeInclusive<usize> {
        let st = self.sign.value() * t;
        let lo = ((st - self.h - self.offset) / self.spacing).ceil();
        let hi = ((st + self.h - self.offset) / self.spacing).floor();
        let hi = hi.min(self.n_cut as f64);
        if !(hi >= 0.0) || lo > hi {
            #[allow(clippy::reversed_empty_ranges)]
            return 1..=0;
        }
        (lo.max(0.0) as usize)..=(hi as usize)
    }

    /// Calls `visit(j, K^{(r)}(argument_j))` for each active series term at `t`.
    #[inline]
    pub fn for_each_term<F: FnMut(usize, f64)>(&self, t: f64, mut visit: F) {
        let st = self.sign.value() * t;
        for j in self.active_range(t) {
            let arg = self.sign.value() * (st - self.offset - self.spacing * j as f64) / self.h;
            let v = self.kernel.eval(self.order, arg);
            if v != 0.0 {
                visit(j, v);
            }
        }
    }

    /// `L^{sign}_{h,N}(t)`.
    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_term(t, |j, v| acc += self.coeffs[j] * v);
        self.prefactor * acc
    }

    /// Centres of the kernel windows (in the `t` variable) for `j = 0..=N`.
    pub fn window_centres(&self) -> impl Iterator<Item = f64> + '_ {
        (0..=self.n_cut).map(move |j| self.sign.value() * (self.offset + self.spacing * j as f64))
    }
}

/// `L^{sign}_{h,N}(t)` for a one-off evaluation.
pub fn deconv_kernel_eval(
    model: &ErrorModel,
    kernel: &SmoothKernel,
    sign: Sign,
    h: f64,
    n_cut: usize,
    t: f64,
) -> Result<f64> {
    Ok(DeconvKernel::new(model, kernel, sign, h, n_cut)?.eval(t))
}

/// Distance between consecutive smoothing windows in the exact mean of the estimator:
/// `2θ` for the uniform family and `1` for the binomial family.
pub fn remainder_step(model: &ErrorModel) -> f64 {
    match *model {
        ErrorModel::UniformConv { theta, .. } => 2.0 * theta,
        ErrorModel::Binomial { .. } => 1.0,
    }
}

/// Weights of the truncation remainder.
///
/// The truncated kernel has the exact mean
/// `E L^{±}_{h,N}(Y - x0) = ∫K(y) f(x0 + yh) dy + Σ_l w_l ∫K(y) f(x0 ± l·step + yh) dy`,
/// where `step` is [`remainder_step`] and `l` runs over `N+1..=N+m`. The weights are the
/// coefficients of the truncated series `Σ_{j≤N} a_j x^j` multiplied by `(1 - x)^m` (uniform,
/// `a_j = C_{j,m}`) or `(1 + x)^m` (binomial, `a_j = (-1)^j C_{j,m}`); the full series times that
/// factor is exactly `1`.
pub fn remainder_weights(model: &ErrorModel, n_cut: usize) -> Vec<(usize, f64)> {
    let m = model.multiplicity() as usize;
    let (alternating_series, alternating_factor) = match model {
        ErrorModel::UniformConv { .. } => (false, true),
        ErrorModel::Binomial { .. } => (true, false),
    };
    let a = |j: usize| {
        let c = composition_coeff(j as u64, m as u32);
        if alternating_series && j % 2 == 1 {
            -c
        } else {
            c
        }
    };
    let b = |k: usize| {
        let c = crate::error_models::binomial(m as u64, k as u64);
        if alternating_factor && k % 2 == 1 {
            -c
        } else {
            c
        }
    };
    (n_cut + 1..=n_cut + m)
        .map(|l| {
            let w: f64 = (n_cut + 1..=l).map(|j| a(j) * b(l - j)).sum();
            (l, -w)
        })
        .collect()
}

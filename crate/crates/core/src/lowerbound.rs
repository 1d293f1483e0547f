//! Two-hypothesis construction behind the minimax lower bound.
//!
//! The base density is the generalized Cauchy law `f0(x) = C(s) / (1 + x^2)^s`. The alternative
//! is `f1 = f0 + c0 M eta`, where `eta` is band-limited. In heavy-tail mode its Fourier transform
//! sits on small windows around the zeros `pi k / theta` (`k = N+1..2N`) of the uniform error
//! transform, so `f1` and `f0` stay close after convolution with the error. In standard mode the
//! perturbation sits on the ring `1/h < |w| < 2/h`.
//!
//! The profile `eta0` has transform `phi_eta0`, a smooth cutoff equal to one on `[0, 1 - delta)`
//! and zero from 1 on. Derivatives of `eta0` are tabulated as piecewise Chebyshev expansions. The
//! observation-level chi-square distance is computed in two ways:
//!
//! * heavy-tail mode expands `eta0(h(x - e))` in powers of `h e`, so `g * eta` only needs the
//!   error moments `mu_{p,k} = ∫ g(e) e^p exp(-i pi k e / theta) de`;
//! * standard mode evaluates `g * eta` as a cosine transform of `phi_g phi_eta` over one band.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::{Arc, Mutex, OnceLock};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{DeconvError, Result};
use crate::error_models::ErrorModel;
use crate::quadrature::{integrate, GaussLegendre, QuadOptions};

/// Default width of the cutoff transition.
pub const DEFAULT_DELTA: f64 = 1.0 / 16.0;

/// Range `|y| <= TABLE_Y_MAX` covered by the tabulated profile derivatives.
pub const TABLE_Y_MAX: f64 = 1100.0;

/// The validity grid spans `|y| <= VALIDITY_Y` in the profile argument.
pub const VALIDITY_Y: f64 = 1000.0;

/// Number of points in the validity grid.
pub const VALIDITY_POINTS: usize = 100_000;

/// Default cut of the chi-square integral, in the profile argument.
pub const CHI2_Y_MAX: f64 = 800.0;

const TABLE_SPAN: f64 = 8.0;
const TABLE_DEGREE: usize = 28;
const TRANSITION_PANELS: usize = 64;
const MAX_TAYLOR_ORDER: usize = 60;
const PANEL_PHASE: f64 = 6.0;
const CHUNK: usize = 2048;

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta < 0.125 {
        Ok(())
    } else {
        Err(DeconvError::invalid(format!("delta must lie in (0, 1/8), got {delta}")))
    }
}

fn bump(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        0.0
    } else {
        (-1.0 / (u * (1.0 - u))).exp()
    }
}

fn gl20() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(20))
}

fn gl16() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(16))
}

/// `∫_u^1 bump`.
fn bump_upper_mass(u: f64) -> f64 {
    if u >= 1.0 {
        return 0.0;
    }
    let u = u.max(0.0);
    gl20().composite(bump, u, 1.0, 16)
}

fn bump_mass() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| bump_upper_mass(0.0))
}

/// Cutoff value at `u = (|w| - (1 - delta)) / delta` inside the transition.
fn transition_value(u: f64) -> f64 {
    if u <= 0.0 {
        1.0
    } else if u >= 1.0 {
        0.0
    } else {
        (bump_upper_mass(u) / bump_mass()).clamp(0.0, 1.0)
    }
}

/// The cutoff `phi_eta0(omega)`: even, one on `|omega| < 1 - delta`, zero for `|omega| >= 1`,
/// decreasing smoothly in between.
pub fn smooth_cutoff(omega: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    let w = omega.abs();
    Ok(transition_value((w - (1.0 - delta)) / delta))
}

/// `eta0(x) = (1/pi) ∫_0^1 phi_eta0(w) cos(w x) dw`, by adaptive quadrature.
pub fn eta0_eval(x: f64, delta: f64) -> Result<f64> {
    eta0_derivative(0, x, delta)
}

/// `p`-th derivative of `eta0` at `x`, by adaptive quadrature of
/// `(1/pi) ∫_0^1 phi_eta0(w) w^p cos(w x + p pi / 2) dw`.
///
/// For `p = 0` and `|x| >= 1` the plateau is integrated by parts, which leaves
/// `(1 / (pi |x| Z)) ∫_0^1 b(u) sin((1 - delta + delta u) |x|) du` with `b` the transition bump and
/// `Z` its mass. That form has no cancellation between the plateau and the transition.
pub fn eta0_derivative(p: u32, x: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if p == 0 && x.abs() >= 1.0 {
        let y = x.abs();
        let opts = QuadOptions { abs_tol: 2e-16, rel_tol: 1e-10, max_intervals: 40_000 };
        let r = integrate(|u| bump(u) * ((1.0 - delta + delta * u) * y).sin(), 0.0, 1.0, &[], opts)?;
        return Ok(r.value / (PI * y * bump_mass()));
    }
    let phase = p as f64 * FRAC_PI_2;
    let pi32 = p as i32;
    let opts = QuadOptions { abs_tol: 1e-14, rel_tol: 1e-10, max_intervals: 40_000 };
    let plateau = integrate(|w| w.powi(pi32) * (w * x + phase).cos(), 0.0, 1.0 - delta, &[], opts)?;
    let edge = integrate(
        |u| {
            let w = 1.0 - delta + delta * u;
            transition_value(u) * w.powi(pi32) * (w * x + phase).cos()
        },
        0.0,
        1.0,
        &[],
        opts,
    )?;
    Ok((plateau.value + delta * edge.value) / PI)
}

/// Piecewise Chebyshev tables of `eta0` and its first `p_max` derivatives on `|y| <= y_max`.
///
/// Node values come from one Gauss–Legendre sum over `[0, 1]` with panels fine enough for the
/// largest `y`. Beyond the table, evaluation falls back to [`eta0_derivative`].
#[derive(Debug, Clone)]
pub struct Eta0Table {
    delta: f64,
    y_max: f64,
    p_max: usize,
    intervals: usize,
    // layout: [interval][p][coefficient]
    coeffs: Vec<f64>,
}

impl Eta0Table {
    pub fn new(delta: f64, y_max: f64, p_max: usize) -> Result<Self> {
        check_delta(delta)?;
        if !(y_max > 0.0 && y_max.is_finite()) {
            return Err(DeconvError::invalid(format!("table range must be positive, got {y_max}")));
        }
        if p_max > MAX_TAYLOR_ORDER {
            return Err(DeconvError::invalid(format!(
                "derivative order {p_max} exceeds {MAX_TAYLOR_ORDER}"
            )));
        }
        let (omegas, weights) = cutoff_rule(delta, y_max + TABLE_SPAN);
        let intervals = (y_max / TABLE_SPAN).ceil() as usize;
        let n = TABLE_DEGREE + 1;
        let np = p_max + 1;
        let cheb: Vec<f64> = (0..n)
            .map(|j| (PI * (j as f64 + 0.5) / n as f64).cos())
            .collect();
        let mut coeffs = vec![0.0; intervals * np * n];
        let mut values = vec![0.0; np * n];
        let mut cos_acc = vec![0.0; np];
        let mut sin_acc = vec![0.0; np];
        for i in 0..intervals {
            let mid = (i as f64 + 0.5) * TABLE_SPAN;
            for (j, &t) in cheb.iter().enumerate() {
                let y = mid + 0.5 * TABLE_SPAN * t;
                cos_acc.iter_mut().for_each(|v| *v = 0.0);
                sin_acc.iter_mut().for_each(|v| *v = 0.0);
                for (&w, &c) in omegas.iter().zip(&weights) {
                    let (s, co) = (w * y).sin_cos();
                    let mut pw = c;
                    for p in 0..np {
                        cos_acc[p] += pw * co;
                        sin_acc[p] += pw * s;
                        pw *= w;
                    }
                }
                for p in 0..np {
                    // d^p/dy^p cos(w y) = w^p cos(w y + p pi / 2)
                    values[p * n + j] = match p % 4 {
                        0 => cos_acc[p],
                        1 => -sin_acc[p],
                        2 => -cos_acc[p],
                        _ => sin_acc[p],
                    };
                }
            }
            for p in 0..np {
                let base = (i * np + p) * n;
                for k in 0..n {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += values[p * n + j] * (PI * k as f64 * (j as f64 + 0.5) / n as f64).cos();
                    }
                    coeffs[base + k] = 2.0 * acc / n as f64;
                }
                coeffs[base] *= 0.5;
            }
        }
        Ok(Eta0Table { delta, y_max, p_max, intervals, coeffs })
    }

    /// Process-wide cache keyed by `(delta, p_max)` with `y_max = TABLE_Y_MAX`. Orders are rounded
    /// up to a multiple of eight so nearby requests share a table.
    pub fn shared(delta: f64, p_max: usize) -> Result<Arc<Eta0Table>> {
        static CACHE: OnceLock<Mutex<HashMap<(u64, usize), Arc<Eta0Table>>>> = OnceLock::new();
        let p_max = p_max.max(1).div_ceil(8) * 8;
        let key = (delta.to_bits(), p_max);
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        if let Some(t) = cache.lock().expect("table cache poisoned").get(&key) {
            return Ok(Arc::clone(t));
        }
        let table = Arc::new(Eta0Table::new(delta, TABLE_Y_MAX, p_max)?);
        let mut guard = cache.lock().expect("table cache poisoned");
        Ok(Arc::clone(guard.entry(key).or_insert(table)))
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn p_max(&self) -> usize {
        self.p_max
    }

    /// Writes `eta0^{(p)}(y)` into `out[p]` for `p < out.len()`.
    pub fn eval_into(&self, y: f64, out: &mut [f64]) {
        assert!(out.len() <= self.p_max + 1, "table holds derivatives up to {}", self.p_max);
        let ay = y.abs();
        if ay > self.y_max {
            for (p, o) in out.iter_mut().enumerate() {
                let v = eta0_derivative(p as u32, ay, self.delta).unwrap_or(f64::NAN);
                *o = if y < 0.0 && p % 2 == 1 { -v } else { v };
            }
            return;
        }
        let i = ((ay / TABLE_SPAN) as usize).min(self.intervals - 1);
        let t = (ay - (i as f64 + 0.5) * TABLE_SPAN) / (0.5 * TABLE_SPAN);
        let n = TABLE_DEGREE + 1;
        let np = self.p_max + 1;
        for (p, o) in out.iter_mut().enumerate() {
            let c = &self.coeffs[(i * np + p) * n..(i * np + p + 1) * n];
            let v = clenshaw(c, t);
            *o = if y < 0.0 && p % 2 == 1 { -v } else { v };
        }
    }

    pub fn eval(&self, p: usize, y: f64) -> f64 {
        let mut out = [0.0; MAX_TAYLOR_ORDER + 1];
        self.eval_into(y, &mut out[..=p]);
        out[p]
    }
}

fn clenshaw(c: &[f64], t: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &ck in c.iter().skip(1).rev() {
        let b0 = 2.0 * t * b1 - b2 + ck;
        b2 = b1;
        b1 = b0;
    }
    t * b1 - b2 + c[0]
}

/// Nodes `w_q` and weights `c_q = w_q-weight * phi_eta0(w_q) / pi` on `[0, 1]`, fine enough for
/// `cos(w y)` with `|y| <= y_range`.
fn cutoff_rule(delta: f64, y_range: f64) -> (Vec<f64>, Vec<f64>) {
    let rule = gl16();
    let plateau_panels = ((1.0 - delta) * y_range / 3.0).ceil() as usize + 4;
    let (mut xs, mut ws) = rule.composite_nodes(0.0, 1.0 - delta, plateau_panels);
    let edge_panels = TRANSITION_PANELS.max((delta * y_range / 3.0).ceil() as usize);
    let (us, uw) = rule.composite_nodes(0.0, 1.0, edge_panels);
    for (u, w) in us.into_iter().zip(uw) {
        xs.push(1.0 - delta + delta * u);
        ws.push(delta * w * transition_value(u));
    }
    ws.iter_mut().for_each(|w| *w /= PI);
    (xs, ws)
}

/// Normalizing constant `C(s) = Gamma(s) / (sqrt(pi) Gamma(s - 1/2))` of `(1 + x^2)^{-s}`.
pub fn cauchy_constant(s: f64) -> Result<f64> {
    if !(s > 0.5 && s.is_finite()) {
        return Err(DeconvError::invalid(format!("tail parameter s must exceed 1/2, got {s}")));
    }
    Ok((ln_gamma(s) - ln_gamma(s - 0.5)).exp() / PI.sqrt())
}

/// `∫ (1 + x^2)^{-s} dx` by quadrature. With `x = tan t` and `pi/2 - |t| = r^k`,
/// `k = 1 / (2s - 1)`, the integrand becomes the bounded `2 k (sin v / v)^{2s-2}` at `v = r^k`.
fn cauchy_mass(s: f64) -> Result<f64> {
    let k = 1.0 / (2.0 * s - 1.0);
    let top = FRAC_PI_2.powf(1.0 / k);
    let r = integrate(
        |r: f64| {
            let v = r.powf(k);
            (v.sin() / v).powf(2.0 * s - 2.0)
        },
        0.0,
        top,
        &[],
        QuadOptions { abs_tol: 0.0, rel_tol: 1e-12, max_intervals: 40_000 },
    )?;
    Ok(2.0 * k * r.value)
}

fn cauchy_kernel(s: f64, x: f64) -> f64 {
    let base = 1.0 + x * x;
    if s == s.trunc() && s <= 16.0 {
        1.0 / base.powi(s as i32)
    } else {
        base.powf(-s)
    }
}

/// Which perturbation is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationMode {
    /// Transform supported near the zeros of the error transform; amplitude `h^{2s-1}/N`.
    Heavy,
    /// Transform on `1/h < |w| < 2/h`; amplitude `A h^{alpha+1}`.
    Standard,
}

fn default_a() -> f64 {
    1.0
}

fn default_delta() -> f64 {
    DEFAULT_DELTA
}

/// Parameters of the two-hypothesis pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSpec {
    pub s: f64,
    pub h: f64,
    #[serde(rename = "N", default)]
    pub n_cut: usize,
    pub theta: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    pub c0: f64,
    pub mode: PerturbationMode,
    #[serde(rename = "A", default = "default_a")]
    pub a: f64,
}

impl PerturbationSpec {
    pub fn heavy(s: f64, h: f64, n_cut: usize, theta: f64, c0: f64) -> Self {
        PerturbationSpec {
            s,
            h,
            n_cut,
            theta,
            delta: DEFAULT_DELTA,
            c0,
            mode: PerturbationMode::Heavy,
            a: 1.0,
        }
    }

    pub fn standard(s: f64, h: f64, theta: f64, c0: f64) -> Self {
        PerturbationSpec {
            s,
            h,
            n_cut: 0,
            theta,
            delta: DEFAULT_DELTA,
            c0,
            mode: PerturbationMode::Standard,
            a: 1.0,
        }
    }

    pub fn with_c0(mut self, c0: f64) -> Self {
        self.c0 = c0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        check_delta(self.delta)?;
        cauchy_constant(self.s)?;
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(DeconvError::invalid(format!("h must be positive, got {}", self.h)));
        }
        if !(self.theta > 0.0 && self.theta.is_finite()) {
            return Err(DeconvError::invalid(format!("theta must be positive, got {}", self.theta)));
        }
        if !(self.c0 >= 0.0 && self.c0.is_finite()) {
            return Err(DeconvError::invalid(format!("c0 must be nonnegative, got {}", self.c0)));
        }
        match self.mode {
            PerturbationMode::Heavy => {
                if self.n_cut == 0 {
                    return Err(DeconvError::invalid("heavy-tail mode needs N >= 1"));
                }
                // the lowest window must stay away from the origin for eta to integrate to zero
                if self.h >= PI * (self.n_cut as f64 + 1.0) / self.theta {
                    return Err(DeconvError::invalid(format!(
                        "h = {} is too large for N = {} and theta = {}",
                        self.h, self.n_cut, self.theta
                    )));
                }
            }
            PerturbationMode::Standard => {
                if !(self.a > 0.0 && self.a.is_finite()) {
                    return Err(DeconvError::invalid(format!("A must be positive, got {}", self.a)));
                }
            }
        }
        Ok(())
    }

    /// Amplitude `M`: `h^{2s-1}/N` (heavy) or `A h^{alpha+1}` (standard).
    pub fn amplitude(&self, alpha: Option<f64>) -> Result<f64> {
        match self.mode {
            PerturbationMode::Heavy => Ok(self.h.powf(2.0 * self.s - 1.0) / self.n_cut as f64),
            PerturbationMode::Standard => {
                let alpha = alpha
                    .filter(|a| *a > 0.0 && a.is_finite())
                    .ok_or_else(|| DeconvError::invalid("standard mode needs a positive alpha"))?;
                Ok(self.a * self.h.powf(alpha + 1.0))
            }
        }
    }

    /// Maps the profile argument `y` to `x`: `x = y / h` (heavy) or `x = 2 h y` (standard).
    fn x_of_profile(&self, y: f64) -> f64 {
        match self.mode {
            PerturbationMode::Heavy => y / self.h,
            PerturbationMode::Standard => 2.0 * self.h * y,
        }
    }

    /// Highest angular frequency present in `eta`.
    fn max_frequency(&self) -> f64 {
        match self.mode {
            PerturbationMode::Heavy => 2.0 * PI * self.n_cut as f64 / self.theta + self.h,
            PerturbationMode::Standard => 2.0 / self.h,
        }
    }
}

/// `eta(x)` with the profile read from `table`.
fn eta_with(spec: &PerturbationSpec, table: &Eta0Table, x: f64) -> f64 {
    match spec.mode {
        PerturbationMode::Heavy => {
            let profile = table.eval(0, spec.h * x);
            2.0 * spec.h * profile * cosine_band_sum(spec.n_cut, PI * x / spec.theta)
        }
        PerturbationMode::Standard => {
            let profile = table.eval(0, x / (2.0 * spec.h));
            profile * (1.5 * x / spec.h).cos() / spec.h
        }
    }
}

/// `Σ_{k=N+1}^{2N} cos(k t)`.
fn cosine_band_sum(n: usize, t: f64) -> f64 {
    let step = Complex64::cis(t);
    let mut z = Complex64::cis((n as f64 + 1.0) * t);
    let mut acc = 0.0;
    for _ in 0..n {
        acc += z.re;
        z *= step;
    }
    acc
}

/// The perturbation `eta(x)` of `spec` (the amplitude `c0 M` is not applied).
pub fn perturbation_eval(x: f64, spec: &PerturbationSpec) -> Result<f64> {
    spec.validate()?;
    let table = Eta0Table::shared(spec.delta, 0)?;
    Ok(eta_with(spec, &table, x))
}

/// Validity and separation figures of a built pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairDiagnostics {
    pub c0: f64,
    pub amplitude: f64,
    pub normalizing_constant: f64,
    pub min_f1: f64,
    pub min_f1_at: f64,
    pub integral_f1: f64,
    pub separation: f64,
    pub expected_separation: f64,
    /// `max f1(x) |x|^{2s}` over `1 <= |x| <= 1000`.
    pub tail_weighted_max: f64,
}

/// Base density `f0` and alternative `f1 = f0 + c0 M eta`.
#[derive(Debug, Clone)]
pub struct PerturbationPair {
    spec: PerturbationSpec,
    alpha: Option<f64>,
    c_s: f64,
    amplitude: f64,
    table: Arc<Eta0Table>,
}

impl PerturbationPair {
    fn new(spec: &PerturbationSpec, alpha: Option<f64>) -> Result<Self> {
        spec.validate()?;
        let amplitude = spec.amplitude(alpha)?;
        Ok(PerturbationPair {
            spec: *spec,
            alpha,
            c_s: cauchy_constant(spec.s)?,
            amplitude,
            table: Eta0Table::shared(spec.delta, 0)?,
        })
    }

    pub fn spec(&self) -> &PerturbationSpec {
        &self.spec
    }

    pub fn alpha(&self) -> Option<f64> {
        self.alpha
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn normalizing_constant(&self) -> f64 {
        self.c_s
    }

    pub fn f0(&self, x: f64) -> f64 {
        self.c_s * cauchy_kernel(self.spec.s, x)
    }

    pub fn eta(&self, x: f64) -> f64 {
        eta_with(&self.spec, &self.table, x)
    }

    pub fn f1(&self, x: f64) -> f64 {
        self.f0(x) + self.spec.c0 * self.amplitude * self.eta(x)
    }

    /// Nonnegative half of the validity grid (`f0` and `eta` are even).
    fn validity_grid(&self) -> impl Iterator<Item = f64> + '_ {
        let half = VALIDITY_POINTS / 2;
        (0..=half).map(move |j| self.spec.x_of_profile(VALIDITY_Y * j as f64 / half as f64))
    }

    fn integral_f1(&self) -> Result<f64> {
        let f0_mass = self.c_s * cauchy_mass(self.spec.s)?;
        let x_max = self.spec.x_of_profile(self.table.y_max());
        let width = PANEL_PHASE / self.spec.max_frequency();
        let panels = (x_max / width).ceil() as usize;
        let eta_mass = 2.0 * parallel_gl(0.0, x_max, panels, |x| self.eta(x));
        Ok(f0_mass + self.spec.c0 * self.amplitude * eta_mass)
    }
}

/// Builds `(f0, f1)` and checks `f1 >= 0` on the validity grid.
///
/// Fails with [`DeconvError::NegativeDensity`] at the first offending grid point.
pub fn build_pair(spec: &PerturbationSpec, alpha: Option<f64>) -> Result<(PerturbationPair, PairDiagnostics)> {
    let pair = PerturbationPair::new(spec, alpha)?;
    let mut min_f1 = f64::INFINITY;
    let mut min_at = 0.0;
    for x in pair.validity_grid() {
        let v = pair.f1(x);
        if v < 0.0 {
            return Err(DeconvError::NegativeDensity { x, value: v });
        }
        if v < min_f1 {
            min_f1 = v;
            min_at = x;
        }
    }
    let tail_points = 10_000;
    let tail_weighted_max = (0..=tail_points)
        .map(|j| {
            let x = 10f64.powf(3.0 * j as f64 / tail_points as f64);
            pair.f1(x) * x.powf(2.0 * spec.s)
        })
        .fold(0.0, f64::max);
    let eta_at_zero = pair.table.eval(0, 0.0);
    let expected_separation = match spec.mode {
        PerturbationMode::Heavy => spec.c0 * 2.0 * eta_at_zero * spec.h.powf(2.0 * spec.s),
        PerturbationMode::Standard => {
            spec.c0 * spec.a * spec.h.powf(alpha.unwrap_or(0.0)) * eta_at_zero
        }
    };
    let diagnostics = PairDiagnostics {
        c0: spec.c0,
        amplitude: pair.amplitude,
        normalizing_constant: pair.c_s,
        min_f1,
        min_f1_at: min_at,
        integral_f1: pair.integral_f1()?,
        separation: (pair.f1(0.0) - pair.f0(0.0)).abs(),
        expected_separation,
        tail_weighted_max,
    };
    Ok((pair, diagnostics))
}

/// Largest `c0 = 2^{-j}` (`j = 0..=60`) for which `f1 >= 0` on the validity grid.
///
/// Since `f1` is affine in `c0`, the exact threshold `min f0 / (M |eta|)` over grid points with
/// `eta < 0` is computed first and rounded down to a power of one half.
pub fn largest_valid_c0(spec: &PerturbationSpec, alpha: Option<f64>) -> Result<f64> {
    let pair = PerturbationPair::new(&spec.with_c0(0.0), alpha)?;
    let mut limit = f64::INFINITY;
    for x in pair.validity_grid() {
        let e = pair.eta(x);
        if e < 0.0 {
            limit = limit.min(pair.f0(x) / (pair.amplitude * -e));
        }
    }
    let mut c0 = 1.0;
    for _ in 0..=60 {
        if c0 <= limit {
            return Ok(c0);
        }
        c0 *= 0.5;
    }
    Err(DeconvError::numeric(format!("no c0 >= 2^-60 keeps f1 nonnegative (threshold {limit:e})")))
}

/// Composite 16-point Gauss–Legendre sum over `panels` equal panels of `[a, b]`, split into
/// fixed chunks that are reduced in order so the result does not depend on the thread count.
fn parallel_gl<F: Fn(f64) -> f64 + Sync>(a: f64, b: f64, panels: usize, f: F) -> f64 {
    let panels = panels.max(1);
    let step = (b - a) / panels as f64;
    let rule = gl16();
    let chunks = panels.div_ceil(CHUNK);
    let partial: Vec<f64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = 0.0;
            for p in c * CHUNK..((c + 1) * CHUNK).min(panels) {
                let mid = a + step * (p as f64 + 0.5);
                let mut panel = 0.0;
                for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
                    panel += w * f(mid + 0.5 * step * t);
                }
                acc += panel;
            }
            acc * 0.5 * step
        })
        .collect();
    partial.iter().sum()
}

/// `(g * f0)(x)` for a uniform-convolution error, by fixed Gauss–Legendre panels on each
/// polynomial piece of the error density. Panels are at most 1/2 wide, well inside the strip of
/// analyticity of `f0`.
struct ConvolvedBase {
    s: f64,
    c_s: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl ConvolvedBase {
    fn new(model: &ErrorModel, s: f64) -> Result<Self> {
        let rule = GaussLegendre::new(12);
        let knots = model.density_breakpoints();
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        for w in knots.windows(2) {
            let panels = ((w[1] - w[0]) / 0.5).ceil() as usize;
            let (xs, ws) = rule.composite_nodes(w[0], w[1], panels);
            for (e, q) in xs.into_iter().zip(ws) {
                nodes.push(e);
                weights.push(q * model.density(e).unwrap_or(0.0));
            }
        }
        Ok(ConvolvedBase { s, c_s: cauchy_constant(s)?, nodes, weights })
    }

    fn eval(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for (&e, &w) in self.nodes.iter().zip(&self.weights) {
            acc += w * cauchy_kernel(self.s, x - e);
        }
        acc * self.c_s
    }
}

/// Error moments `mu_{p,k} = ∫ g(e) e^p exp(-i pi k e / theta) de` for `p <= p_max` and
/// `k = N+1..=2N`, indexed `[k - N - 1][p]`.
fn error_moments(model: &ErrorModel, theta: f64, n: usize, p_max: usize) -> Vec<Vec<Complex64>> {
    let rule = gl20();
    let knots = model.density_breakpoints();
    let top = PI * 2.0 * n as f64 / theta;
    let mut out = vec![vec![Complex64::new(0.0, 0.0); p_max + 1]; n];
    for w in knots.windows(2) {
        let panels = ((w[1] - w[0]) * top / 3.0).ceil() as usize + 2;
        let (xs, ws) = rule.composite_nodes(w[0], w[1], panels);
        for (e, q) in xs.into_iter().zip(ws) {
            let ge = q * model.density(e).unwrap_or(0.0);
            for (ki, row) in out.iter_mut().enumerate() {
                let k = (n + 1 + ki) as f64;
                let phase = Complex64::cis(-PI * k * e / theta) * ge;
                let mut pw = 1.0;
                for cell in row.iter_mut() {
                    *cell += phase * pw;
                    pw *= e;
                }
            }
        }
    }
    out
}

/// Smallest order `P > m` with `(h R)^P / P! <= 1e-18 (h R)^m / m!`, `R` the error half-width.
fn taylor_order(h: f64, m: u32, radius: f64) -> Result<usize> {
    let r = h * radius;
    let lead = (1..=m).fold(1.0, |acc, i| acc * r / i as f64);
    let mut term = lead;
    for p in (m as usize + 1)..=MAX_TAYLOR_ORDER {
        term *= r / p as f64;
        if term <= 1e-18 * lead.max(f64::MIN_POSITIVE) {
            return Ok(p);
        }
    }
    Err(DeconvError::numeric(format!(
        "h * support radius = {r} is too large for the moment expansion"
    )))
}

/// Evaluator of `(g * eta)(x)`.
enum ConvolvedPerturbation {
    Moments {
        h: f64,
        theta: f64,
        n: usize,
        order: usize,
        table: Arc<Eta0Table>,
        // [k - N - 1][p], with 2 h (-h)^p / p! folded in
        coeffs: Vec<Vec<Complex64>>,
    },
    Spectral {
        omegas: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl ConvolvedPerturbation {
    fn new(model: &ErrorModel, spec: &PerturbationSpec, y_cut: f64) -> Result<Self> {
        let (m, model_theta) = match *model {
            ErrorModel::UniformConv { m, theta } => (m, theta),
            ErrorModel::Binomial { .. } => {
                return Err(DeconvError::invalid(
                    "the chi-square computation targets uniform-convolution errors",
                ))
            }
        };
        match spec.mode {
            PerturbationMode::Heavy => {
                let radius = m as f64 * model_theta;
                let order = taylor_order(spec.h, m, radius)?;
                let table = Eta0Table::shared(spec.delta, order)?;
                let moments = error_moments(model, spec.theta, spec.n_cut, order);
                let mut scale = vec![0.0; order + 1];
                scale[0] = 2.0 * spec.h;
                for p in 1..=order {
                    scale[p] = scale[p - 1] * -spec.h / p as f64;
                }
                let coeffs = moments
                    .into_iter()
                    .map(|row| row.into_iter().zip(&scale).map(|(mu, &c)| mu * c).collect())
                    .collect();
                Ok(ConvolvedPerturbation::Moments {
                    h: spec.h,
                    theta: spec.theta,
                    n: spec.n_cut,
                    order,
                    table,
                    coeffs,
                })
            }
            PerturbationMode::Standard => {
                // w = (v + 3) / (2h) maps the cutoff variable v in [-1, 1] onto the band
                let rule = gl16();
                let delta = spec.delta;
                let x_range = 2.0 * spec.h * y_cut;
                let per_v = x_range / (2.0 * spec.h);
                let mut omegas = Vec::new();
                let mut weights = Vec::new();
                let mut push = |v: f64, w: f64, cut: f64| {
                    let omega = (v + 3.0) / (2.0 * spec.h);
                    let phase = model_theta * omega;
                    let g_hat = (phase.sin() / phase).powi(m as i32);
                    omegas.push(omega);
                    weights.push(w / (2.0 * spec.h) * cut * g_hat / PI);
                };
                let edge_panels = TRANSITION_PANELS.max((delta * per_v / 3.0).ceil() as usize);
                let (us, uw) = rule.composite_nodes(0.0, 1.0, edge_panels);
                for (&u, &w) in us.iter().zip(&uw) {
                    push(-1.0 + delta * (1.0 - u), delta * w, transition_value(u));
                }
                let plateau = ((2.0 - 2.0 * delta) * per_v / 3.0).ceil() as usize + 4;
                let (vs, vw) = rule.composite_nodes(-1.0 + delta, 1.0 - delta, plateau);
                for (v, w) in vs.into_iter().zip(vw) {
                    push(v, w, 1.0);
                }
                for (&u, &w) in us.iter().zip(&uw) {
                    push(1.0 - delta + delta * u, delta * w, transition_value(u));
                }
                Ok(ConvolvedPerturbation::Spectral { omegas, weights })
            }
        }
    }

    fn eval(&self, x: f64) -> f64 {
        match self {
            ConvolvedPerturbation::Moments { h, theta, n, order, table, coeffs } => {
                let mut d = [0.0; MAX_TAYLOR_ORDER + 1];
                table.eval_into(h * x, &mut d[..=*order]);
                let t = PI * x / theta;
                let step = Complex64::cis(t);
                let mut z = Complex64::cis((*n as f64 + 1.0) * t);
                let mut acc = 0.0;
                for row in coeffs {
                    let mut b = Complex64::new(0.0, 0.0);
                    for (c, &dp) in row.iter().zip(&d[..=*order]) {
                        b += c * dp;
                    }
                    acc += (z * b).re;
                    z *= step;
                }
                acc
            }
            ConvolvedPerturbation::Spectral { omegas, weights } => omegas
                .iter()
                .zip(weights)
                .map(|(&w, &c)| c * (w * x).cos())
                .sum(),
        }
    }
}

/// `(g * eta)(x)` for the perturbation of `spec` under `model` (uniform family only).
pub fn convolved_perturbation(model: &ErrorModel, spec: &PerturbationSpec, x: f64) -> Result<f64> {
    spec.validate()?;
    Ok(ConvolvedPerturbation::new(model, spec, CHI2_Y_MAX)?.eval(x))
}

/// Options of [`chi2_divergence_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Chi2Options {
    /// The integral runs over `|y| <= y_cut` in the profile argument.
    pub y_cut: f64,
}

impl Default for Chi2Options {
    fn default() -> Self {
        Chi2Options { y_cut: CHI2_Y_MAX }
    }
}

/// `∫ (f_{Y,1} - f_{Y,0})^2 / f_{Y,0}` for the pair under a uniform-convolution error.
pub fn chi2_divergence(model: &ErrorModel, pair: &PerturbationPair) -> Result<f64> {
    chi2_divergence_with(model, pair, Chi2Options::default())
}

pub fn chi2_divergence_with(model: &ErrorModel, pair: &PerturbationPair, opts: Chi2Options) -> Result<f64> {
    model.validate()?;
    let spec = pair.spec();
    let conv = ConvolvedPerturbation::new(model, spec, opts.y_cut)?;
    if spec.c0 == 0.0 {
        return Ok(0.0);
    }
    if !(opts.y_cut > 0.0 && opts.y_cut <= TABLE_Y_MAX) {
        return Err(DeconvError::invalid(format!(
            "chi-square cut must lie in (0, {TABLE_Y_MAX}], got {}",
            opts.y_cut
        )));
    }
    let base = ConvolvedBase::new(model, spec.s)?;
    let x_max = spec.x_of_profile(opts.y_cut);
    let width = PANEL_PHASE / (2.0 * spec.max_frequency());
    let panels = (x_max / width).ceil() as usize;
    let bad = std::sync::atomic::AtomicBool::new(false);
    let integral = parallel_gl(0.0, x_max, panels, |x| {
        let d = base.eval(x);
        if !(d > 0.0 && d.is_finite()) {
            bad.store(true, std::sync::atomic::Ordering::Relaxed);
            return 0.0;
        }
        let v = conv.eval(x);
        v * v / d
    });
    if bad.into_inner() {
        return Err(DeconvError::numeric("observation density of f0 underflowed"));
    }
    let amp = spec.c0 * pair.amplitude();
    Ok(2.0 * amp * amp * integral)
}

/// One point of a chi-square sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub h: f64,
    #[serde(rename = "N")]
    pub n_cut: usize,
    pub chi2: f64,
    /// `chi2 h^{-(2m+2s-1)} N^{2m+1}`.
    pub scaled: f64,
    pub diagnostics: PairDiagnostics,
}

/// Heavy-tail chi-square sweep over an `(h, N)` grid with one common `c0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub s: f64,
    pub m: u32,
    pub theta: f64,
    pub c0: f64,
    pub points: Vec<SweepPoint>,
    /// Least-squares slopes of `ln chi2` against `ln h` and `ln N`.
    pub exponent_h: Option<f64>,
    pub exponent_n: Option<f64>,
}

impl SweepReport {
    /// `scaled` of every point divided by that of the first point.
    pub fn ratios_to_anchor(&self) -> Vec<f64> {
        let anchor = self.points.first().map(|p| p.scaled).unwrap_or(f64::NAN);
        self.points.iter().map(|p| p.scaled / anchor).collect()
    }
}

/// Runs the heavy-tail construction for every `(h, N)` in `hs × ns` with the largest power-of-half
/// `c0` that is valid for all of them.
pub fn chi2_sweep(model: &ErrorModel, s: f64, hs: &[f64], ns: &[usize], delta: f64) -> Result<SweepReport> {
    let (m, theta) = match *model {
        ErrorModel::UniformConv { m, theta } => (m, theta),
        ErrorModel::Binomial { .. } => {
            return Err(DeconvError::invalid("the sweep targets uniform-convolution errors"))
        }
    };
    if hs.is_empty() || ns.is_empty() {
        return Err(DeconvError::invalid("sweep needs at least one h and one N"));
    }
    let specs: Vec<PerturbationSpec> = hs
        .iter()
        .flat_map(|&h| {
            ns.iter().map(move |&n| PerturbationSpec { delta, ..PerturbationSpec::heavy(s, h, n, theta, 0.0) })
        })
        .collect();
    let mut c0 = 1.0f64;
    for spec in &specs {
        c0 = c0.min(largest_valid_c0(spec, None)?);
    }
    let mut points = Vec::with_capacity(specs.len());
    for spec in &specs {
        let spec = spec.with_c0(c0);
        let (pair, diagnostics) = build_pair(&spec, None)?;
        let chi2 = chi2_divergence(model, &pair)?;
        let scaled = chi2 * spec.h.powf(-(2.0 * m as f64 + 2.0 * s - 1.0))
            * (spec.n_cut as f64).powf(2.0 * m as f64 + 1.0);
        points.push(SweepPoint { h: spec.h, n_cut: spec.n_cut, chi2, scaled, diagnostics });
    }
    let (exponent_h, exponent_n) = fit_exponents(&points);
    Ok(SweepReport { s, m, theta, c0, points, exponent_h, exponent_n })
}

/// Least-squares fit of `ln chi2 = a + b ln h + c ln N`; a slope is `None` when its regressor
/// does not vary.
fn fit_exponents(points: &[SweepPoint]) -> (Option<f64>, Option<f64>) {
    let vary = |f: &dyn Fn(&SweepPoint) -> f64| {
        points.iter().any(|p| (f(p) - f(&points[0])).abs() > 1e-12)
    };
    let use_h = vary(&|p| p.h.ln());
    let use_n = vary(&|p| (p.n_cut as f64).ln());
    let cols = 1 + use_h as usize + use_n as usize;
    if points.len() < cols || cols == 1 {
        return (None, None);
    }
    let mut x = DMatrix::zeros(points.len(), cols);
    let mut y = DVector::zeros(points.len());
    for (i, p) in points.iter().enumerate() {
        x[(i, 0)] = 1.0;
        let mut c = 1;
        if use_h {
            x[(i, c)] = p.h.ln();
            c += 1;
        }
        if use_n {
            x[(i, c)] = (p.n_cut as f64).ln();
        }
        y[i] = p.chi2.ln();
    }
    let Ok(beta) = x.svd(true, true).solve(&y, 1e-12) else {
        return (None, None);
    };
    let mut c = 1;
    let eh = use_h.then(|| {
        c += 1;
        beta[c - 1]
    });
    let en = use_n.then(|| beta[c]);
    (eh, en)
}

//! Target densities with exact evaluators, numeric CDFs and samplers.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Cauchy, Distribution, Normal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::error::{DeconvError, Result};
use crate::lowerbound::cauchy_constant;
use crate::quadrature::{integrate, QuadOptions};
use crate::rng::{self, SimRng};

/// Proposals allowed per accepted draw before the sampler gives up.
pub const MAX_PROPOSALS: u64 = 1_000_000;

/// A target density `f` of the latent variable `X`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TestDensity {
    /// `C(s) / (1 + x^2)^s`, `s > 1/2`.
    GeneralizedCauchy { s: f64 },
    Gaussian { mu: f64, sigma: f64 },
    /// The smooth bump `exp(-1 / (1 - u^2))` rescaled to `[lo, hi]`.
    UniformBump { lo: f64, hi: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureComponent {
    pub weight: f64,
    pub density: TestDensity,
}

/// Class information used when choosing oracle tuning.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DensityMetadata {
    /// Effective tail exponent: `f(x) |x|^q` stays bounded. `None` for light tails.
    pub q: Option<f64>,
    /// Descriptive Hölder smoothness. `None` for analytic or `C^∞` densities.
    pub alpha: Option<f64>,
}

fn bump_mass() -> f64 {
    static MASS: OnceLock<f64> = OnceLock::new();
    *MASS.get_or_init(|| {
        integrate(bump, -1.0, 1.0, &[0.0], QuadOptions::with_rel(1e-13))
            .expect("bump normalization converges")
            .value
    })
}

fn bump(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        0.0
    } else {
        (-1.0 / (1.0 - u * u)).exp()
    }
}

fn cdf_options() -> QuadOptions {
    QuadOptions { abs_tol: 1e-13, rel_tol: 1e-12, max_intervals: 20_000 }
}

impl TestDensity {
    pub fn validate(&self) -> Result<()> {
        match self {
            TestDensity::GeneralizedCauchy { s } => cauchy_constant(*s).map(|_| ()),
            TestDensity::Gaussian { mu, sigma } => {
                if mu.is_finite() && *sigma > 0.0 && sigma.is_finite() {
                    Ok(())
                } else {
                    Err(DeconvError::invalid(format!("bad gaussian parameters ({mu}, {sigma})")))
                }
            }
            TestDensity::UniformBump { lo, hi } => {
                if lo.is_finite() && hi.is_finite() && lo < hi {
                    Ok(())
                } else {
                    Err(DeconvError::invalid(format!("bump support [{lo}, {hi}] is empty")))
                }
            }
            TestDensity::Mixture { components } => {
                if components.is_empty() {
                    return Err(DeconvError::invalid("mixture needs at least one component"));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
                    return Err(DeconvError::invalid(format!(
                        "mixture weights must be positive and sum to one (sum {total})"
                    )));
                }
                components.iter().try_for_each(|c| c.density.validate())
            }
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self {
            TestDensity::GeneralizedCauchy { s } => {
                cauchy_constant(*s).unwrap_or(f64::NAN) * (1.0 + x * x).powf(-s)
            }
            TestDensity::Gaussian { mu, sigma } => {
                let z = (x - mu) / sigma;
                (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
            }
            TestDensity::UniformBump { lo, hi } => {
                let half = 0.5 * (hi - lo);
                bump((x - 0.5 * (lo + hi)) / half) / (half * bump_mass())
            }
            TestDensity::Mixture { components } => {
                components.iter().map(|c| c.weight * c.density.pdf(x)).sum()
            }
        }
    }

    /// Distribution function: closed form for the Gaussian and the Cauchy case `s = 1`,
    /// quadrature otherwise.
    pub fn cdf(&self, x: f64) -> Result<f64> {
        match self {
            TestDensity::GeneralizedCauchy { s } => {
                if *s == 1.0 {
                    return Ok(0.5 + x.atan() / PI);
                }
                // x = tan t on [0, atan |x|]
                let c = cauchy_constant(*s)?;
                let top = x.abs().atan();
                let half = integrate(|t: f64| t.cos().powf(2.0 * s - 2.0), 0.0, top, &[], cdf_options())?;
                Ok(0.5 + x.signum() * c * half.value)
            }
            TestDensity::Gaussian { mu, sigma } => Ok(NormalDist::new(*mu, *sigma)
                .map_err(|e| DeconvError::invalid(e.to_string()))?
                .cdf(x)),
            TestDensity::UniformBump { lo, hi } => {
                if x <= *lo {
                    return Ok(0.0);
                }
                if x >= *hi {
                    return Ok(1.0);
                }
                let half = 0.5 * (hi - lo);
                let u = (x - 0.5 * (lo + hi)) / half;
                let part = integrate(bump, -1.0, u, &[], cdf_options())?;
                Ok((part.value / bump_mass()).clamp(0.0, 1.0))
            }
            TestDensity::Mixture { components } => components
                .iter()
                .map(|c| Ok(c.weight * c.density.cdf(x)?))
                .sum(),
        }
    }

    /// Points where the density is not analytic, for quadrature splitting.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            TestDensity::UniformBump { lo, hi } => vec![*lo, *hi],
            TestDensity::Mixture { components } => {
                let mut pts: Vec<f64> = components.iter().flat_map(|c| c.density.breakpoints()).collect();
                pts.sort_by(f64::total_cmp);
                pts.dedup();
                pts
            }
            _ => Vec::new(),
        }
    }

    pub fn metadata(&self) -> DensityMetadata {
        match self {
            TestDensity::GeneralizedCauchy { s } => DensityMetadata { q: Some(2.0 * s), alpha: None },
            TestDensity::Gaussian { .. } | TestDensity::UniformBump { .. } => {
                DensityMetadata { q: None, alpha: None }
            }
            TestDensity::Mixture { components } => {
                let q = components
                    .iter()
                    .filter_map(|c| c.density.metadata().q)
                    .fold(None, |acc: Option<f64>, q| Some(acc.map_or(q, |a| a.min(q))));
                DensityMetadata { q, alpha: None }
            }
        }
    }

    /// One draw. `proposals` accumulates the number of candidates tried by rejection steps.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R, proposals: &mut u64) -> Result<f64> {
        match self {
            TestDensity::GeneralizedCauchy { s } => {
                let s = *s;
                if s < 1.0 {
                    // the Cauchy envelope does not dominate here; (1 + x^2)^{-s} is a scaled t law
                    let nu = 2.0 * s - 1.0;
                    let t = StudentT::new(nu).map_err(|e| DeconvError::invalid(e.to_string()))?;
                    *proposals += 1;
                    return Ok(t.sample(rng) / nu.sqrt());
                }
                let cauchy = Cauchy::new(0.0, 1.0).expect("standard cauchy");
                for _ in 0..MAX_PROPOSALS {
                    *proposals += 1;
                    let x: f64 = cauchy.sample(rng);
                    // f / (C(s) pi g) = (1 + x^2)^{1 - s} <= 1
                    if s == 1.0 || rng.random::<f64>() < (1.0 + x * x).powf(1.0 - s) {
                        return Ok(x);
                    }
                }
                Err(stall())
            }
            TestDensity::Gaussian { mu, sigma } => {
                *proposals += 1;
                let normal = Normal::new(*mu, *sigma).map_err(|e| DeconvError::invalid(e.to_string()))?;
                Ok(normal.sample(rng))
            }
            TestDensity::UniformBump { lo, hi } => {
                let half = 0.5 * (hi - lo);
                let mid = 0.5 * (lo + hi);
                for _ in 0..MAX_PROPOSALS {
                    *proposals += 1;
                    let u = rng.random_range(-1.0..1.0);
                    // the bump peaks at e^{-1}
                    if rng.random::<f64>() < bump(u) * std::f64::consts::E {
                        return Ok(mid + half * u);
                    }
                }
                Err(stall())
            }
            TestDensity::Mixture { components } => {
                let mut pick = rng.random::<f64>();
                let last = components.len() - 1;
                for (i, c) in components.iter().enumerate() {
                    if pick < c.weight || i == last {
                        return c.density.draw(rng, proposals);
                    }
                    pick -= c.weight;
                }
                unreachable!("mixture has components")
            }
        }
    }
}

fn stall() -> DeconvError {
    DeconvError::numeric(format!("rejection sampler made {MAX_PROPOSALS} proposals without acceptance"))
}

/// `n` draws from `density` using `rng`.
pub fn sample_with(density: &TestDensity, n: usize, rng: &mut SimRng) -> Result<Vec<f64>> {
    density.validate()?;
    let mut proposals = 0u64;
    let out = (0..n)
        .map(|_| density.draw(rng, &mut proposals))
        .collect::<Result<Vec<_>>>()?;
    if n > 0 {
        log::debug!("acceptance ratio {:.4} over {n} draws", n as f64 / proposals as f64);
    }
    Ok(out)
}

/// `n` i.i.d. draws from `density`, deterministic in `seed`.
pub fn sample_target(density: &TestDensity, n: usize, seed: u64) -> Result<Vec<f64>> {
    sample_with(density, n, &mut rng::stream(seed, "target", &[]))
}

/// Kolmogorov–Smirnov statistic `sup |F_n - F|` of `sample` against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> Result<f64>>(sample: &[f64], cdf: F) -> Result<f64> {
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = cdf(x)?;
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn all() -> Vec<TestDensity> {
        vec![
            TestDensity::GeneralizedCauchy { s: 1.0 },
            TestDensity::GeneralizedCauchy { s: 0.75 },
            TestDensity::GeneralizedCauchy { s: 2.0 },
            TestDensity::Gaussian { mu: 0.3, sigma: 1.7 },
            TestDensity::UniformBump { lo: -1.0, hi: 1.0 },
            TestDensity::Mixture {
                components: vec![
                    MixtureComponent { weight: 0.3, density: TestDensity::Gaussian { mu: -2.0, sigma: 0.5 } },
                    MixtureComponent { weight: 0.7, density: TestDensity::UniformBump { lo: 0.0, hi: 3.0 } },
                ],
            },
        ]
    }

    #[test]
    fn densities_integrate_to_one() {
        for d in all() {
            // substitution x = tan t maps the line onto (-pi/2, pi/2)
            let mut pts: Vec<f64> = d.breakpoints().iter().map(|b| b.atan()).collect();
            pts.push(0.0);
            let mass = integrate(
                |t: f64| {
                    let c = t.cos();
                    d.pdf(t.tan()) / (c * c)
                },
                -PI / 2.0,
                PI / 2.0,
                &pts,
                QuadOptions { abs_tol: 1e-10, rel_tol: 1e-10, max_intervals: 40_000 },
            )
            .unwrap()
            .value;
            assert!((mass - 1.0).abs() < 1e-6, "{d:?}: mass {mass}");
        }
    }

    #[test]
    fn cdf_matches_density() {
        for d in all() {
            for x in [-3.0, -0.4, 0.0, 0.9, 2.5] {
                let h = 1e-5;
                let fd = (d.cdf(x + h).unwrap() - d.cdf(x - h).unwrap()) / (2.0 * h);
                assert!((fd - d.pdf(x)).abs() < 1e-6, "{d:?} at {x}: {fd} vs {}", d.pdf(x));
            }
            assert!(d.cdf(-1e6).unwrap() < 1e-3 && d.cdf(1e6).unwrap() > 1.0 - 1e-3);
        }
    }

    #[test]
    fn samplers_pass_kolmogorov_smirnov() {
        let n = 100_000;
        for (i, d) in all().into_iter().enumerate() {
            let xs = sample_target(&d, n, 40 + i as u64).unwrap();
            let stat = ks_statistic(&xs, |x| d.cdf(x)).unwrap();
            assert!(stat <= 1.63 / (n as f64).sqrt(), "{d:?}: KS {stat}");
        }
    }

    #[test]
    fn gaussian_sample_mean() {
        let d = TestDensity::Gaussian { mu: 2.0, sigma: 3.0 };
        let n = 50_000;
        let xs = sample_target(&d, n, 9).unwrap();
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 4.0 * 3.0 / (n as f64).sqrt());
    }

    #[test]
    fn cauchy_case_accepts_every_proposal() {
        let d = TestDensity::GeneralizedCauchy { s: 1.0 };
        let mut rng = rng::stream(1, "t", &[]);
        let mut proposals = 0;
        for _ in 0..1000 {
            d.draw(&mut rng, &mut proposals).unwrap();
        }
        assert_eq!(proposals, 1000);
        assert_relative_eq!(d.pdf(0.0), 1.0 / PI, max_relative = 1e-14);
    }

    #[test]
    fn sampling_is_deterministic() {
        let d = TestDensity::GeneralizedCauchy { s: 2.0 };
        assert_eq!(sample_target(&d, 100, 5).unwrap(), sample_target(&d, 100, 5).unwrap());
        assert_ne!(sample_target(&d, 100, 5).unwrap(), sample_target(&d, 100, 6).unwrap());
    }

    #[test]
    fn metadata_and_validation() {
        assert_eq!(TestDensity::GeneralizedCauchy { s: 2.0 }.metadata().q, Some(4.0));
        assert!(TestDensity::GeneralizedCauchy { s: 0.5 }.validate().is_err());
        assert!(TestDensity::UniformBump { lo: 1.0, hi: 1.0 }.validate().is_err());
        let bad = TestDensity::Mixture {
            components: vec![MixtureComponent { weight: 0.5, density: TestDensity::Gaussian { mu: 0.0, sigma: 1.0 } }],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn json_form() {
        let d: TestDensity = serde_json::from_str(r#"{"kind":"generalized_cauchy","s":2}"#).unwrap();
        assert_eq!(d, TestDensity::GeneralizedCauchy { s: 2.0 });
        let b: TestDensity = serde_json::from_str(r#"{"kind":"uniform_bump","lo":-1,"hi":1}"#).unwrap();
        assert_eq!(b, TestDensity::UniformBump { lo: -1.0, hi: 1.0 });
        assert!(serde_json::from_str::<TestDensity>(r#"{"kind":"gaussian","mu":0}"#).is_err());
    }
}

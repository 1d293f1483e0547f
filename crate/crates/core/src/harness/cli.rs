//! Command line front end: `estimate`, `simulate`, `rates`, `lowerbound` and `grids`.
//!
//! Exit codes: 0 on success, 2 for invalid input or usage, 3 for numeric failures.

use std::io::{Read, Write};
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::adaptive::select_adaptive;
use crate::error::{DeconvError, Result};
use crate::error_models::ErrorModel;
use crate::estimators::{estimate_point, TuningPair};
use crate::harness::experiment::{fit_log_log, monte_carlo_risk, write_csv, write_csv_path, ExperimentPlan};
use crate::kernels::{build_kernel, DEFAULT_ORDER};
use crate::lowerbound::{
    build_pair, chi2_divergence, chi2_sweep, largest_valid_c0, PerturbationMode, PerturbationSpec,
    DEFAULT_DELTA,
};
use crate::tuning::{
    default_grids_for, minimax_params, minimax_raw, rate_exponents, rate_holder, rate_phi, regime,
    ClassParams, GridSpec,
};

#[derive(Debug, Parser)]
#[command(name = "deconv-lab", version, about = "Pointwise density deconvolution with vanishing error transforms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum EstimateMode {
    Fixed,
    Minimax,
    Adaptive,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LowerMode {
    Heavy,
    Standard,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the density at one point from a sample file.
    Estimate {
        /// Error law, e.g. `uniform:m=1,theta=1` or `binomial:m=2`.
        #[arg(long)]
        error: ErrorModel,
        #[arg(long, default_value_t = 0.5, allow_negative_numbers = true)]
        x0: f64,
        /// One observation per line, or a CSV column headed `y`; `-` reads stdin.
        #[arg(long, default_value = "-")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "adaptive")]
        mode: EstimateMode,
        #[arg(long)]
        h: Option<f64>,
        #[arg(long = "N")]
        n_cut: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        q: Option<f64>,
        #[arg(long = "A", default_value_t = 1.0)]
        a: f64,
        #[arg(long = "B", default_value_t = 1.0)]
        b: f64,
        #[arg(long)]
        kappa: Option<f64>,
        /// Number of vanishing kernel moments.
        #[arg(long, default_value_t = DEFAULT_ORDER)]
        k: u32,
        /// Comma-separated bandwidth grid (adaptive mode).
        #[arg(long, value_delimiter = ',')]
        bandwidths: Option<Vec<f64>>,
        /// Comma-separated cut-off grid (adaptive mode).
        #[arg(long, value_delimiter = ',')]
        cutoffs: Option<Vec<usize>>,
    },
    /// Run a Monte Carlo experiment described by a JSON plan and write the risk table as CSV.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        threads: Option<usize>,
        /// Output path; overrides `out` from the plan. Without either, CSV goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rate exponents and oracle tuning for a density class.
    Rates {
        #[arg(long)]
        alpha: f64,
        #[arg(long)]
        q: f64,
        #[arg(long)]
        m: u32,
        #[arg(long, default_value_t = 1.0)]
        theta: f64,
        #[arg(long = "A", default_value_t = 1.0)]
        a: f64,
        #[arg(long = "B", default_value_t = 1.0)]
        b: f64,
        #[arg(long, default_value_t = 1000)]
        n: usize,
    },
    /// Build the two-hypothesis pair and report validity, separation and chi-square distance.
    Lowerbound {
        #[arg(long)]
        s: f64,
        #[arg(long)]
        m: u32,
        #[arg(long, default_value_t = 1.0)]
        theta: f64,
        #[arg(long)]
        h: f64,
        #[arg(long = "N", default_value_t = 1)]
        n_cut: usize,
        #[arg(long, value_enum, default_value = "heavy")]
        mode: LowerMode,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long = "A", default_value_t = 1.0)]
        a: f64,
        #[arg(long, default_value_t = DEFAULT_DELTA)]
        delta: f64,
        /// Amplitude; defaults to the largest valid power of one half.
        #[arg(long)]
        c0: Option<f64>,
        /// Also evaluate h, h/2, h/4 (and N, 2N, 4N in heavy mode) and fit the exponents.
        #[arg(long)]
        sweep: bool,
    },
    /// Default adaptive grids for a sample size.
    Grids {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        error: ErrorModel,
    },
}

/// Runs the CLI on `args` (including the program name), printing to stdout and stderr.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run_cli_with(args, &mut stdout.lock(), &mut stderr.lock())
}

/// [`run_cli`] with explicit output streams.
pub fn run_cli_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let rendered = e.render().to_string();
            let _ = if code == 0 { write!(out, "{rendered}") } else { write!(err, "{rendered}") };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn print_json(out: &mut dyn Write, value: &Value) -> Result<()> {
    serde_json::to_writer_pretty(&mut *out, value)?;
    writeln!(out)?;
    Ok(())
}

/// Parses one observation per line, optionally under a `y` header. Blank lines are skipped.
pub fn parse_sample(text: &str) -> Result<Vec<f64>> {
    let mut values = Vec::new();
    let mut first = true;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if first && line.trim_matches('"') == "y" {
            first = false;
            continue;
        }
        first = false;
        let v: f64 = line
            .parse()
            .map_err(|_| DeconvError::Parse(format!("line {}: {line:?} is not a number", i + 1)))?;
        if !v.is_finite() {
            return Err(DeconvError::Parse(format!("line {}: non-finite value", i + 1)));
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err(DeconvError::invalid("the sample is empty"));
    }
    Ok(values)
}

fn read_input(path: &PathBuf) -> Result<String> {
    if path.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        Ok(s)
    } else {
        Ok(std::fs::read_to_string(path)?)
    }
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Estimate {
            error,
            x0,
            input,
            mode,
            h,
            n_cut,
            alpha,
            q,
            a,
            b,
            kappa,
            k,
            bandwidths,
            cutoffs,
        } => {
            let sample = parse_sample(&read_input(&input)?)?;
            let kernel = build_kernel(k)?;
            let n = sample.len();
            let report = match mode {
                EstimateMode::Fixed => {
                    let (h, n_cut) = h
                        .zip(n_cut)
                        .ok_or_else(|| DeconvError::invalid("fixed mode needs --h and --N"))?;
                    let tau = TuningPair::new(h, n_cut)?;
                    let est = estimate_point(&sample, x0, &error, &kernel, &tau)?;
                    json!({"mode": "fixed", "x0": x0, "n": n, "estimate": est,
                           "tau": tau.with_sign(tau.sign_at(x0))})
                }
                EstimateMode::Minimax => {
                    let (alpha, q) = alpha
                        .zip(q)
                        .ok_or_else(|| DeconvError::invalid("minimax mode needs --alpha and --q"))?;
                    let params = ClassParams::new(alpha, q, a, b)?;
                    let tau = crate::tuning::minimax_params_for(n, &params, &error)?;
                    let est = estimate_point(&sample, x0, &error, &kernel, &tau)?;
                    json!({"mode": "minimax", "x0": x0, "n": n, "estimate": est,
                           "tau": tau.with_sign(tau.sign_at(x0))})
                }
                EstimateMode::Adaptive => {
                    let grid = match (bandwidths, cutoffs) {
                        (Some(bw), Some(cut)) => GridSpec::new(bw, cut)?,
                        (None, None) => default_grids_for(n, &error)?,
                        _ => {
                            return Err(DeconvError::invalid(
                                "give both --bandwidths and --cutoffs, or neither",
                            ))
                        }
                    };
                    let (tau, est, trace) = select_adaptive(&sample, x0, &error, &kernel, &grid, kappa)?;
                    json!({"mode": "adaptive", "x0": x0, "n": n, "estimate": est, "tau": tau,
                           "trace": trace})
                }
            };
            print_json(out, &report)
        }
        Command::Simulate { config, seed, threads, out: out_path } => {
            let text = std::fs::read_to_string(&config)?;
            let mut plan: ExperimentPlan = serde_json::from_str(&text)?;
            plan.seed = seed;
            plan.validate()?;
            let report = match threads {
                Some(t) => {
                    if t == 0 {
                        return Err(DeconvError::invalid("--threads must be positive"));
                    }
                    let pool = rayon::ThreadPoolBuilder::new()
                        .num_threads(t)
                        .build()
                        .map_err(|e| DeconvError::numeric(e.to_string()))?;
                    pool.install(|| monte_carlo_risk(&plan))?
                }
                None => monte_carlo_risk(&plan)?,
            };
            match out_path.or(plan.out.clone()) {
                Some(path) => {
                    write_csv_path(&report, &path)?;
                    print_json(out, &json!({"out": path, "slope": report.slope,
                                            "half_width": report.half_width, "rows": report.rows}))
                }
                None => write_csv(&report, out),
            }
        }
        Command::Rates { alpha, q, m, theta, a, b, n } => {
            let params = ClassParams::new(alpha, q, a, b)?;
            let (r, nu) = rate_exponents(alpha, q, m);
            let (h_raw, n_raw) = minimax_raw(n, &params, m)?;
            let tau = minimax_params(n, &params, m, theta)?;
            print_json(
                out,
                &json!({
                    "regime": regime(q, m),
                    "r": r,
                    "nu": nu,
                    "h_star": tau.h,
                    "N_star": tau.n_cut,
                    "h_raw": h_raw,
                    "N_raw": n_raw,
                    "phi": rate_phi(n, &params, m)?,
                    "psi": rate_holder(n, alpha, m, a)?,
                }),
            )
        }
        Command::Lowerbound { s, m, theta, h, n_cut, mode, alpha, a, delta, c0, sweep } => {
            let model = ErrorModel::uniform(m, theta)?;
            let mode = match mode {
                LowerMode::Heavy => PerturbationMode::Heavy,
                LowerMode::Standard => PerturbationMode::Standard,
            };
            let base = PerturbationSpec { s, h, n_cut, theta, delta, c0: 0.0, mode, a };
            base.validate()?;
            if mode == PerturbationMode::Heavy && sweep {
                let hs = [h, h / 2.0, h / 4.0];
                let ns = [n_cut, 2 * n_cut, 4 * n_cut];
                let report = chi2_sweep(&model, s, &hs, &ns, delta)?;
                return print_json(out, &serde_json::to_value(&report)?);
            }
            let c0 = match c0 {
                Some(c) => c,
                None => largest_valid_c0(&base, alpha)?,
            };
            let spec = base.with_c0(c0);
            let (pair, diag) = build_pair(&spec, alpha)?;
            let chi2 = chi2_divergence(&model, &pair)?;
            let mut exponent_h = Value::Null;
            if sweep {
                let hs = [h, h / 2.0, h / 4.0];
                let mut c = c0;
                for &hh in &hs[1..] {
                    c = c.min(largest_valid_c0(&PerturbationSpec { h: hh, ..base }, alpha)?);
                }
                let chis = hs
                    .iter()
                    .map(|&hh| {
                        let (p, _) = build_pair(&PerturbationSpec { h: hh, ..spec.with_c0(c) }, alpha)?;
                        chi2_divergence(&model, &p)
                    })
                    .collect::<Result<Vec<_>>>()?;
                exponent_h = json!(fit_log_log(&hs, &chis)?.slope);
            }
            print_json(
                out,
                &json!({
                    "spec": spec,
                    "c0": diag.c0,
                    "amplitude": diag.amplitude,
                    "min_f1": diag.min_f1,
                    "min_f1_at": diag.min_f1_at,
                    "integral_f1": diag.integral_f1,
                    "separation": diag.separation,
                    "expected_separation": diag.expected_separation,
                    "tail_weighted_max": diag.tail_weighted_max,
                    "chi2": chi2,
                    "exponent_h": exponent_h,
                }),
            )
        }
        Command::Grids { n, error } => {
            let grid = default_grids_for(n, &error)?;
            print_json(out, &json!({"n": n, "error": error.to_string(),
                                    "bandwidths": grid.bandwidths, "cutoffs": grid.cutoffs}))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_cli_with(
            std::iter::once("deconv-lab").chain(args.iter().copied()),
            &mut out,
            &mut err,
        );
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn rates_reports_nu() {
        let (code, out, _) = run(&["rates", "--alpha", "1", "--q", "1", "--m", "2"]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert!((v["nu"].as_f64().unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert_eq!(v["regime"], "heavy");
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(&["rates", "--alpha", "1"]).0, 2);
        assert_eq!(run(&["frobnicate"]).0, 2);
        assert_eq!(run(&["grids", "--n", "100", "--error", "uniform:m=1"]).0, 2);
        assert_eq!(run(&["rates", "--alpha", "-1", "--q", "1", "--m", "2"]).0, 2);
        assert_eq!(run(&["--help"]).0, 0);
    }

    #[test]
    fn grids_output() {
        let (code, out, _) = run(&["grids", "--n", "4096", "--error", "uniform:m=1,theta=1"]);
        assert_eq!(code, 0);
        let v: Value = serde_json::from_str(&out).unwrap();
        assert!(!v["bandwidths"].as_array().unwrap().is_empty());
        assert_eq!(v["cutoffs"][0], 1);
    }

    #[test]
    fn sample_parsing() {
        assert_eq!(parse_sample("1.5\n\n-2\n").unwrap(), vec![1.5, -2.0]);
        assert_eq!(parse_sample("y\n0.25\n3\n").unwrap(), vec![0.25, 3.0]);
        assert!(matches!(parse_sample("1\nx\n"), Err(DeconvError::Parse(_))));
        assert!(parse_sample("y\n").is_err());
        assert!(parse_sample("nan\n").is_err());
    }
}

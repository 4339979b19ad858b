//! Small-position replication experiments.
//!
//! For a claim of `x` units the per-unit cost `H_0(x) = Y^x_0 / x` is compared with
//! the frictionless value, its slope at zero with the closed-form derivative,
//! and the impacted terminal quote with the price implied by the frictionless
//! delta. All runs share one path bundle.

use std::io::Write;

use ndarray::Array2;
use serde::Serialize;

use crate::book::impacted_quote_path;
use crate::bsde::{
    hedge_from_solution_holding, solve_quadratic_bsde, stock_hedge, terminal_condition, BsdeConfig, BsdeSolution,
    DriverState, TruncatedPayoff,
};
use crate::error::{LabError, Result};
use crate::kernel::TimeGrid;
use crate::ledger::Strategy;
use crate::model::{simulate_paths, ModelParams, PathBundle};
use crate::par::mean_stderr;
use crate::report::fmt17;

/// Identifies the bundle a hedge was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct BundleKey {
    pub seed: u64,
    pub first_path: usize,
    pub n_paths: usize,
    pub n_steps: usize,
}

impl BundleKey {
    pub fn of(bundle: &PathBundle) -> Self {
        Self {
            seed: bundle.seed,
            first_path: bundle.first_path,
            n_paths: bundle.n_paths(),
            n_steps: bundle.n_steps(),
        }
    }
}

/// Frictionless solution: value and delta of `h(S_T)` without impact.
#[derive(Debug, Clone)]
pub struct HatSolution {
    pub solution: BsdeSolution,
    /// `X^ = Z^_1 / (sigma_1 Sigma S)`.
    pub x: Array2<f64>,
    /// Swap holdings from the linear loading map, when requested.
    pub chi: Option<[Array2<f64>; 2]>,
    pub y0: f64,
    pub y0_stderr: f64,
    /// Plain Monte Carlo mean of the untruncated `h(S_T)` on the same paths.
    pub plain_mean: f64,
    pub plain_stderr: f64,
    pub key: BundleKey,
}

pub fn hat_solution(
    bundle: &PathBundle,
    params: &ModelParams,
    payoff: &TruncatedPayoff,
    config: &BsdeConfig,
    maturities: Option<[f64; 2]>,
) -> Result<HatSolution> {
    let lin = params.frictionless();
    let terminal = terminal_condition(bundle, payoff, 1.0, 0.0, None)?;
    let solution = solve_quadratic_bsde(bundle, &DriverState::zero(&lin), &terminal.values, config)?;
    let x = stock_hedge(&solution, bundle, &lin);
    let chi = match maturities {
        Some(m) => Some(hedge_from_solution_holding(&solution, bundle, &lin, m)?.0.chi),
        None => None,
    };
    let n = bundle.n_steps();
    let plain: Vec<f64> = bundle.s.row(n).iter().map(|&s| payoff.payoff.value(s)).collect();
    let (plain_mean, plain_stderr) = mean_stderr(&plain);
    Ok(HatSolution {
        y0: solution.y0,
        y0_stderr: solution.y0_stderr,
        solution,
        x,
        chi,
        plain_mean,
        plain_stderr,
        key: BundleKey::of(bundle),
    })
}

/// Per-path contributions to `H'_0(0)`:
/// `lambda sum mu(U) X^^2 dt - 2 lambda h'(S_T) 1{S_T <= N} sum X^ dM`.
pub fn h_prime_zero_paths(
    bundle: &PathBundle,
    hat: &HatSolution,
    payoff: &TruncatedPayoff,
    params: &ModelParams,
) -> Result<Vec<f64>> {
    check_key(bundle, hat)?;
    let lambda = params.lambda_impact;
    let n = bundle.n_steps();
    let dt = bundle.grid.dt();
    (0..bundle.n_paths())
        .map(|p| {
            let s_t = bundle.s[[n, p]];
            let dh = payoff.payoff.derivative(s_t).ok_or(LabError::MissingDerivative)?;
            if lambda == 0.0 || params.epsilon == 0.0 {
                return Ok(0.0);
            }
            let mut drift = 0.0;
            let mut dm = 0.0;
            for k in 0..n {
                let xh = hat.x[[k, p]];
                drift += params.mu(bundle.u[[k, p]]) * xh * xh * dt;
                dm += xh * (bundle.m[[k + 1, p]] - bundle.m[[k, p]]);
            }
            let ind = if s_t <= payoff.level { 1.0 } else { 0.0 };
            Ok(lambda * drift - 2.0 * lambda * dh * ind * dm)
        })
        .collect()
}

/// Closed-form liquidity premium per unit at zero size, with standard error.
pub fn h_prime_zero(
    bundle: &PathBundle,
    hat: &HatSolution,
    payoff: &TruncatedPayoff,
    params: &ModelParams,
) -> Result<(f64, f64)> {
    let per_path = h_prime_zero_paths(bundle, hat, payoff, params)?;
    Ok(mean_stderr(&per_path))
}

/// Per-path squared gap between the impacted terminal quote under `x_hedge` and `S~^x_T`.
pub fn impact_error_paths(bundle: &PathBundle, x_hedge: &Array2<f64>, s_tilde: &[f64], lambda: f64) -> Result<Vec<f64>> {
    let strategy = Strategy::stock_only(x_hedge.clone());
    let quotes = impacted_quote_path(bundle, &strategy, lambda)?;
    if s_tilde.len() != bundle.n_paths() {
        return Err(LabError::GridMismatch(format!(
            "{} adjusted prices for {} paths",
            s_tilde.len(),
            bundle.n_paths()
        )));
    }
    let n = bundle.n_steps();
    Ok((0..bundle.n_paths())
        .map(|p| (quotes.post[[n, p]] - s_tilde[p]).powi(2))
        .collect())
}

/// `E|S0_{T+} - S~^x_T|^2` for the hedge recovered from `solution`, with standard error.
pub fn impact_error(
    bundle: &PathBundle,
    hat: &HatSolution,
    solution: &BsdeSolution,
    x: f64,
    params: &ModelParams,
) -> Result<(f64, f64)> {
    check_key(bundle, hat)?;
    let lambda = params.lambda_impact;
    let s_tilde = crate::bsde::impact_adjusted_price(bundle, x, lambda, Some(&hat.x))?;
    let xh = stock_hedge(solution, bundle, params);
    Ok(mean_stderr(&impact_error_paths(bundle, &xh, &s_tilde, lambda)?))
}

fn check_key(bundle: &PathBundle, hat: &HatSolution) -> Result<()> {
    let key = BundleKey::of(bundle);
    if key != hat.key {
        return Err(LabError::InconsistentSeeds(format!(
            "hat computed on {:?}, bundle is {:?}",
            hat.key, key
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationRow {
    pub x: f64,
    pub y0: f64,
    pub y0_stderr: f64,
    pub h0: f64,
    /// `H_0(x) - Y^_0` from paired per-path differences.
    pub h0_minus_hat: f64,
    pub h0_minus_hat_stderr: f64,
    pub impact_err: f64,
    pub impact_err_stderr: f64,
    /// Mean over paths and nodes of `(X^x / x - X^)^2`.
    pub delta_l2: f64,
    pub delta_l2_stderr: f64,
    /// Bound `|Y| <= |x| C_N`, checked only when the smallness condition holds.
    pub max_principle: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplicationReport {
    pub rows: Vec<ReplicationRow>,
    pub h0_limit: f64,
    pub h0_limit_stderr: f64,
    pub plain_mc_mean: f64,
    pub plain_mc_stderr: f64,
    pub hprime0_analytic: f64,
    pub hprime0_analytic_stderr: f64,
    pub hprime0_fd: f64,
    pub hprime0_fd_stderr: f64,
    pub h0_loglog_slope: f64,
    pub impact_loglog_slope: f64,
    /// `K` of the least-squares fit `|H_0(x) - Y^_0| ~ K x`.
    pub linear_bound_k: f64,
    pub l: f64,
    pub n_trunc: f64,
    pub n_paths: usize,
    pub n_steps: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
    /// Per-path `(H_0(x) - Y^_0)` contributions, one vector per row.
    #[serde(skip)]
    pub per_path_gap: Vec<Vec<f64>>,
    #[serde(skip)]
    pub per_path_hprime: Vec<f64>,
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.abs().ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.abs().ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Extrapolates `gap(x) / x` linearly to `x = 0`, path by path.
///
/// Returns the mean intercept and its standard error. `gaps[i][p]` is the gap of
/// path `p` at `xs[i]`.
pub fn fd_slope(xs: &[f64], gaps: &[Vec<f64>]) -> (f64, f64) {
    let m = xs.len();
    let n_paths = gaps.first().map_or(0, |g| g.len());
    let weights: Vec<f64> = if m == 1 {
        vec![1.0]
    } else {
        let mean = xs.iter().sum::<f64>() / m as f64;
        let sxx: f64 = xs.iter().map(|x| (x - mean).powi(2)).sum();
        xs.iter()
            .map(|x| 1.0 / m as f64 - mean * (x - mean) / sxx)
            .collect()
    };
    let per_path: Vec<f64> = (0..n_paths)
        .map(|p| (0..m).map(|i| weights[i] * gaps[i][p] / xs[i]).sum())
        .collect();
    mean_stderr(&per_path)
}

pub fn replication_cost_curve(
    params: &ModelParams,
    grid: &TimeGrid,
    payoff: &TruncatedPayoff,
    xs: &[f64],
    n_paths: usize,
    seed: u64,
    config: &BsdeConfig,
) -> Result<ReplicationReport> {
    let bundle = simulate_paths(params, grid, n_paths, seed)?;
    let hat = hat_solution(&bundle, params, payoff, config, None)?;
    replication_on_bundle(&bundle, params, payoff, xs, config, &hat)
}

pub fn replication_on_bundle(
    bundle: &PathBundle,
    params: &ModelParams,
    payoff: &TruncatedPayoff,
    xs: &[f64],
    config: &BsdeConfig,
    hat: &HatSolution,
) -> Result<ReplicationReport> {
    check_key(bundle, hat)?;
    if xs.is_empty() || xs.iter().any(|&x| x == 0.0 || !x.is_finite()) {
        return Err(LabError::InvalidParams("xs must be non-empty, finite and nonzero".into()));
    }
    let lambda = params.lambda_impact;
    let n = bundle.n_steps();
    let c_n = payoff.bound();
    let hat_terms = &hat.solution.contributions;
    let driver = DriverState::new(params);
    let mut warnings = Vec::new();
    let mut rows = Vec::with_capacity(xs.len());
    let mut gaps = Vec::with_capacity(xs.len());
    for &x in xs {
        let terminal = terminal_condition(bundle, payoff, x, lambda, Some(&hat.x))?;
        let sol = solve_quadratic_bsde(bundle, &driver, &terminal.values, config)?;
        let smallness = 4.0 * lambda * sol.max_lambda * c_n * x.abs();
        if smallness >= 1.0 {
            warnings.push(format!(
                "x = {x}: outside the smallness regime (4 lambda C C_N |x| = {smallness:.3})"
            ));
        }
        let max_principle = sol.max_principle_check(x, lambda, c_n);
        if max_principle == Some(false) {
            let worst = sol.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            warnings.push(format!(
                "x = {x}: regression values exceed |x| C_N (max |Y| / (|x| C_N) = {:.3})",
                worst / (x.abs() * c_n)
            ));
        }
        let gap: Vec<f64> = sol
            .contributions
            .iter()
            .zip(hat_terms)
            .map(|(c, h)| c / x - h)
            .collect();
        let (g, g_se) = mean_stderr(&gap);
        let xh = stock_hedge(&sol, bundle, params);
        let l2: Vec<f64> = (0..bundle.n_paths())
            .map(|p| (0..n).map(|k| (xh[[k, p]] / x - hat.x[[k, p]]).powi(2)).sum::<f64>() / n as f64)
            .collect();
        let (d, d_se) = mean_stderr(&l2);
        let (e, e_se) = mean_stderr(&impact_error_paths(bundle, &xh, &terminal.s_tilde, lambda)?);
        rows.push(ReplicationRow {
            x,
            y0: sol.y0,
            y0_stderr: sol.y0_stderr,
            h0: sol.y0 / x,
            h0_minus_hat: g,
            h0_minus_hat_stderr: g_se,
            impact_err: e,
            impact_err_stderr: e_se,
            delta_l2: d,
            delta_l2_stderr: d_se,
            max_principle,
        });
        gaps.push(gap);
    }
    let per_path_hprime = h_prime_zero_paths(bundle, hat, payoff, params)?;
    let (hp, hp_se) = mean_stderr(&per_path_hprime);
    let (fd, fd_se) = fd_slope(xs, &gaps);
    let ds: Vec<f64> = rows.iter().map(|r| r.h0_minus_hat).collect();
    let es: Vec<f64> = rows.iter().map(|r| r.impact_err).collect();
    let many = xs.len() >= 2;
    let sxx: f64 = xs.iter().map(|x| x * x).sum();
    let linear_bound_k = xs.iter().zip(&ds).map(|(x, d)| x.abs() * d.abs()).sum::<f64>() / sxx;
    Ok(ReplicationReport {
        h0_limit: hat.y0,
        h0_limit_stderr: hat.y0_stderr,
        plain_mc_mean: hat.plain_mean,
        plain_mc_stderr: hat.plain_stderr,
        hprime0_analytic: hp,
        hprime0_analytic_stderr: hp_se,
        hprime0_fd: fd,
        hprime0_fd_stderr: fd_se,
        h0_loglog_slope: if many && ds.iter().all(|&d| d != 0.0) { loglog_slope(xs, &ds) } else { f64::NAN },
        impact_loglog_slope: if many && es.iter().all(|&e| e > 0.0) { loglog_slope(xs, &es) } else { f64::NAN },
        linear_bound_k,
        l: config.l,
        n_trunc: config.n_trunc,
        n_paths: bundle.n_paths(),
        n_steps: n,
        seed: bundle.seed,
        warnings,
        rows,
        per_path_gap: gaps,
        per_path_hprime,
    })
}

impl ReplicationReport {
    /// Writes `x,Y0,H0,stderr,H0_minus_hat,H0_minus_hat_stderr,impact_err,impact_err_stderr,delta_l2` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "x,Y0,H0,stderr,H0_minus_hat,H0_minus_hat_stderr,impact_err,impact_err_stderr,delta_l2"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                fmt17(r.x),
                fmt17(r.y0),
                fmt17(r.h0),
                fmt17(r.y0_stderr / r.x.abs()),
                fmt17(r.h0_minus_hat),
                fmt17(r.h0_minus_hat_stderr),
                fmt17(r.impact_err),
                fmt17(r.impact_err_stderr),
                fmt17(r.delta_l2),
            )?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serialisable")
    }
}

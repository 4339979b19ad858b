//! Backward regression solver for the localised quadratic BSDE
//!
//! ```text
//! Y_t = H + lambda int_t^tau Lambda_u Z_{1,u}^2 du - sum_j int_t^tau Z_{j,u} dB_{j,u}
//! ```
//!
//! Conditional expectations are least-squares projections on the paths still
//! alive at each node. `Z` comes from the martingale increment
//! `E[(Y_{k+1} - Y_k) dB_j | F_k] / dt`, and a short Picard loop feeds the
//! refreshed `Z_1` back into the quadratic driver.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use ndarray::Array2;
use serde::Serialize;

use crate::error::{LabError, Result};
use crate::ledger::Strategy;
use crate::model::{ModelParams, PathBundle};
use crate::par::mean_stderr;
use crate::regression::{basis_size, Projection};
use crate::report::fmt17;
use crate::swaps::{invert_hedge, psi_matrix, NodeState};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Lipschitz payoff of the terminal price.
#[derive(Clone)]
pub enum Payoff {
    Identity,
    Constant(f64),
    /// `min(max(s - strike, 0), cap)`.
    ClippedCall { strike: f64, cap: f64 },
    Custom {
        f: ScalarFn,
        df: Option<ScalarFn>,
        lipschitz: f64,
    },
}

impl fmt::Debug for Payoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Payoff::Identity => f.write_str("Identity"),
            Payoff::Constant(c) => write!(f, "Constant({c})"),
            Payoff::ClippedCall { strike, cap } => write!(f, "ClippedCall({strike}, {cap})"),
            Payoff::Custom { lipschitz, .. } => write!(f, "Custom(lipschitz={lipschitz})"),
        }
    }
}

impl Payoff {
    pub fn value(&self, s: f64) -> f64 {
        match self {
            Payoff::Identity => s,
            Payoff::Constant(c) => *c,
            Payoff::ClippedCall { strike, cap } => (s - strike).max(0.0).min(*cap),
            Payoff::Custom { f, .. } => f(s),
        }
    }

    /// Right derivative; `None` when the payoff carries no derivative.
    pub fn derivative(&self, s: f64) -> Option<f64> {
        match self {
            Payoff::Identity => Some(1.0),
            Payoff::Constant(_) => Some(0.0),
            Payoff::ClippedCall { strike, cap } => {
                Some(if s >= *strike && s < strike + cap { 1.0 } else { 0.0 })
            }
            Payoff::Custom { df, .. } => df.as_ref().map(|d| d(s)),
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match self {
            Payoff::Identity | Payoff::ClippedCall { .. } => 1.0,
            Payoff::Constant(_) => 0.0,
            Payoff::Custom { lipschitz, .. } => *lipschitz,
        }
    }
}

/// `h^N(y) = h(y)` for `|y| <= N`, `h(N)` otherwise.
#[derive(Debug, Clone)]
pub struct TruncatedPayoff {
    pub payoff: Payoff,
    pub level: f64,
}

pub fn truncate_payoff(payoff: Payoff, level: f64) -> TruncatedPayoff {
    TruncatedPayoff { payoff, level }
}

impl TruncatedPayoff {
    pub fn eval(&self, y: f64) -> f64 {
        if y.abs() <= self.level {
            self.payoff.value(y)
        } else {
            self.payoff.value(self.level)
        }
    }

    /// `C_N = max |h|` on `[-N, N]`.
    pub fn bound(&self) -> f64 {
        let n = self.level;
        match &self.payoff {
            Payoff::Identity => n,
            Payoff::Constant(c) => c.abs(),
            Payoff::ClippedCall { .. } => self.payoff.value(n).abs(),
            Payoff::Custom { .. } => (0..=20_000)
                .map(|i| self.payoff.value(-n + 2.0 * n * i as f64 / 20_000.0).abs())
                .fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BsdeConfig {
    /// Localisation level `L` of the stopping time.
    pub l: f64,
    /// Payoff truncation level `N`.
    pub n_trunc: f64,
    /// Total polynomial degree of the regression basis.
    pub degree: usize,
    pub picard_iters: usize,
    pub picard_tol: f64,
    pub min_paths_per_regression: usize,
}

impl Default for BsdeConfig {
    fn default() -> Self {
        Self {
            l: 100.0,
            n_trunc: 1000.0,
            degree: 2,
            picard_iters: 5,
            picard_tol: 1e-8,
            min_paths_per_regression: 10,
        }
    }
}

impl BsdeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LabError::InvalidParams(m.into()));
        if !(self.l > 1.0) {
            return bad("bsde L must exceed 1");
        }
        if !(self.n_trunc > 0.0) {
            return bad("bsde N must be positive");
        }
        if self.degree < 1 {
            return bad("regression degree must be at least 1");
        }
        if self.picard_iters < 1 {
            return bad("picard_iters must be at least 1");
        }
        if !(self.picard_tol >= 0.0) {
            return bad("picard_tol must be non-negative");
        }
        Ok(())
    }
}

/// First node where `S <= 1/L`, `Sigma >= L` or `Sigma <= 1/L`; `n_steps` otherwise.
pub fn stopping_index(bundle: &PathBundle, l: f64) -> Vec<usize> {
    let n = bundle.n_steps();
    (0..bundle.n_paths())
        .map(|p| {
            (0..=n)
                .find(|&k| {
                    let (s, sig) = (bundle.s[[k, p]], bundle.sigma[[k, p]]);
                    s <= 1.0 / l || sig >= l || sig <= 1.0 / l
                })
                .unwrap_or(n)
        })
        .collect()
}

/// Per-path terminal values `x h^N(S~^x_T)` and the impact-adjusted price.
#[derive(Debug, Clone)]
pub struct Terminal {
    pub values: Vec<f64>,
    pub s_tilde: Vec<f64>,
}

/// `S~^x_T = S_T - 2 lambda x sum X^_{i-1} dM_i`.
pub fn impact_adjusted_price(bundle: &PathBundle, x: f64, lambda: f64, hat: Option<&Array2<f64>>) -> Result<Vec<f64>> {
    let n = bundle.n_steps();
    let s_t = bundle.s.row(n);
    if lambda * x == 0.0 {
        return Ok(s_t.to_vec());
    }
    let hat = hat.ok_or(LabError::MissingHatHedge)?;
    if hat.dim() != bundle.s.dim() {
        return Err(LabError::GridMismatch(format!(
            "hat hedge {:?} vs bundle {:?}",
            hat.dim(),
            bundle.s.dim()
        )));
    }
    Ok((0..bundle.n_paths())
        .map(|p| {
            let acc: f64 = (1..=n)
                .map(|i| hat[[i - 1, p]] * (bundle.m[[i, p]] - bundle.m[[i - 1, p]]))
                .sum();
            s_t[p] - 2.0 * lambda * x * acc
        })
        .collect())
}

pub fn terminal_condition(
    bundle: &PathBundle,
    payoff: &TruncatedPayoff,
    x: f64,
    lambda: f64,
    hat: Option<&Array2<f64>>,
) -> Result<Terminal> {
    let s_tilde = impact_adjusted_price(bundle, x, lambda, hat)?;
    let values = s_tilde.iter().map(|&s| x * payoff.eval(s)).collect();
    Ok(Terminal { values, s_tilde })
}

/// Quadratic driver `lambda Lambda Z_1^2`.
#[derive(Debug, Clone)]
pub struct DriverState {
    pub lambda: f64,
    pub params: ModelParams,
}

impl DriverState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            lambda: params.lambda_impact,
            params: params.clone(),
        }
    }

    /// A driver that vanishes identically.
    pub fn zero(params: &ModelParams) -> Self {
        Self {
            lambda: 0.0,
            params: params.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub alive: usize,
    pub features: usize,
    pub condition: f64,
    pub picard_deltas: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BsdeSolution {
    /// `[node, path]`; frozen at the terminal value from the stopping node on.
    pub y: Array2<f64>,
    /// `[node, path]`; zero from the stopping node on.
    pub z: [Array2<f64>; 3],
    pub stop: Vec<usize>,
    /// Cross-path value at time zero.
    pub y0: f64,
    /// Standard error from the per-path contributions `H + sum lambda Lambda Z_1^2 dt`.
    pub y0_stderr: f64,
    /// Per-path contributions whose mean is `y0`.
    pub contributions: Vec<f64>,
    /// Every path stopped at node 0.
    pub degenerate_run: bool,
    /// Largest `Lambda` seen on alive nodes.
    pub max_lambda: f64,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl BsdeSolution {
    /// `Some(ok)` when the smallness condition `2 lambda C C_N |x| < 1/2` holds.
    pub fn max_principle_check(&self, x: f64, lambda: f64, c_n: f64) -> Option<bool> {
        if 2.0 * lambda * self.max_lambda * c_n * x.abs() >= 0.5 {
            return None;
        }
        let bound = x.abs() * c_n;
        Some(self.y.iter().all(|&v| v.abs() <= bound * (1.0 + 1e-9) + 1e-12))
    }

    /// Writes `step,alive,features,condition,picard_iters,picard_deltas` rows.
    pub fn write_diagnostics<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "step,alive,features,condition,picard_iters,picard_deltas")?;
        for d in &self.diagnostics {
            let deltas: Vec<String> = d.picard_deltas.iter().map(|&v| fmt17(v)).collect();
            writeln!(
                out,
                "{},{},{},{},{},{}",
                d.step,
                d.alive,
                d.features,
                fmt17(d.condition),
                d.picard_deltas.len(),
                deltas.join(";")
            )?;
        }
        Ok(())
    }
}

fn picard_diverging(deltas: &[f64]) -> bool {
    let n = deltas.len();
    n >= 4 && (n - 3..n).all(|i| deltas[i] > deltas[i - 1])
}

pub fn solve_quadratic_bsde(
    bundle: &PathBundle,
    driver: &DriverState,
    terminal: &[f64],
    config: &BsdeConfig,
) -> Result<BsdeSolution> {
    config.validate()?;
    let (n_nodes, n_paths) = (bundle.n_nodes(), bundle.n_paths());
    if terminal.len() != n_paths {
        return Err(LabError::GridMismatch(format!(
            "{} terminal values for {} paths",
            terminal.len(),
            n_paths
        )));
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(LabError::InvalidParams("terminal values must be finite".into()));
    }
    let n = bundle.n_steps();
    let dt = bundle.grid.dt();
    let stop = stopping_index(bundle, config.l);
    let mut y = Array2::zeros((n_nodes, n_paths));
    let mut z = [
        Array2::zeros((n_nodes, n_paths)),
        Array2::zeros((n_nodes, n_paths)),
        Array2::zeros((n_nodes, n_paths)),
    ];
    for p in 0..n_paths {
        for k in stop[p]..=n {
            y[[k, p]] = terminal[p];
        }
    }
    let mut driver_sum = vec![0.0; n_paths];
    let mut diagnostics = Vec::new();
    let mut max_lambda: f64 = 0.0;
    let min_alive = config.min_paths_per_regression.max(basis_size(3, config.degree));
    let degenerate_run = stop.iter().all(|&s| s == 0);

    for k in (0..n).rev() {
        let alive: Vec<usize> = (0..n_paths).filter(|&p| k < stop[p]).collect();
        if alive.is_empty() {
            continue;
        }
        // At node 0 every path shares the initial state and the fit is a plain mean.
        if alive.len() < min_alive && k > 0 {
            return Err(LabError::RegressionRankDeficient {
                step: k,
                alive: alive.len(),
                basis: min_alive,
            });
        }
        let rows: Vec<[f64; 3]> = alive
            .iter()
            .map(|&p| [bundle.s[[k, p]], bundle.u[[k, p]], bundle.v[[k, p]]])
            .collect();
        let degree = if k == 0 { 0 } else { config.degree };
        let proj = Projection::new(&rows, degree, k)?;
        let y_next: Vec<f64> = alive.iter().map(|&p| y[[k + 1, p]]).collect();
        let db: [Vec<f64>; 3] = std::array::from_fn(|j| {
            alive.iter().map(|&p| bundle.noise.db[j][[k, p]]).collect()
        });
        let lam: Vec<f64> = if driver.lambda == 0.0 {
            vec![0.0; alive.len()]
        } else {
            alive
                .iter()
                .map(|&p| {
                    driver
                        .params
                        .lambda_coeff(bundle.u[[k, p]], bundle.v[[k, p]], bundle.s[[k, p]])
                })
                .collect::<Result<_>>()?
        };
        max_lambda = lam.iter().cloned().fold(max_lambda, f64::max);

        let mut y_cur = proj.project(&y_next);
        let mut z_cur: [Vec<f64>; 3] = Default::default();
        let mut deltas = Vec::new();
        for _ in 0..config.picard_iters {
            for j in 0..3 {
                let target: Vec<f64> = (0..alive.len())
                    .map(|i| (y_next[i] - y_cur[i]) * db[j][i])
                    .collect();
                z_cur[j] = proj.project(&target).into_iter().map(|v| v / dt).collect();
            }
            let target: Vec<f64> = (0..alive.len())
                .map(|i| y_next[i] + driver.lambda * lam[i] * z_cur[0][i] * z_cur[0][i] * dt)
                .collect();
            let y_new = proj.project(&target);
            let delta = y_new
                .iter()
                .zip(&y_cur)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            y_cur = y_new;
            deltas.push(delta);
            if picard_diverging(&deltas) {
                return Err(LabError::PicardDiverged { step: k, deltas });
            }
            if delta <= config.picard_tol {
                break;
            }
        }
        for (i, &p) in alive.iter().enumerate() {
            y[[k, p]] = y_cur[i];
            for j in 0..3 {
                z[j][[k, p]] = z_cur[j][i];
            }
            driver_sum[p] += driver.lambda * lam[i] * z_cur[0][i] * z_cur[0][i] * dt;
        }
        diagnostics.push(StepDiagnostics {
            step: k,
            alive: alive.len(),
            features: proj.n_features(),
            condition: proj.condition(),
            picard_deltas: deltas,
        });
    }
    diagnostics.reverse();
    let contributions: Vec<f64> = terminal.iter().zip(&driver_sum).map(|(h, d)| h + d).collect();
    let (y0, y0_stderr) = mean_stderr(&contributions);
    Ok(BsdeSolution {
        y,
        z,
        stop,
        y0,
        y0_stderr,
        contributions,
        degenerate_run,
        max_lambda,
        diagnostics,
    })
}

/// Shares `X = Z_1 / (sigma_1 Sigma S)` on alive nodes, zero after the stop and at the final node.
pub fn stock_hedge(solution: &BsdeSolution, bundle: &PathBundle, params: &ModelParams) -> Array2<f64> {
    let s1 = params.decomp.sigma()[0];
    let n = bundle.n_steps();
    let mut x = Array2::zeros(bundle.s.dim());
    for p in 0..bundle.n_paths() {
        for k in 0..solution.stop[p].min(n) {
            let denom = s1 * bundle.sigma[[k, p]] * bundle.s[[k, p]];
            x[[k, p]] = solution.z[0][[k, p]] / denom;
        }
    }
    x
}

/// Full hedge `(X, chi_1, chi_2)` by nodewise inversion of the loading map.
pub fn hedge_from_solution(
    solution: &BsdeSolution,
    bundle: &PathBundle,
    params: &ModelParams,
    maturities: [f64; 2],
) -> Result<Strategy> {
    recover_hedge(solution, bundle, params, maturities, false).map(|(s, _)| s)
}

/// As [`hedge_from_solution`], but a node where the swap block is singular (a
/// factor sitting at zero) keeps the previous swap holdings. Returns the number
/// of such nodes.
pub fn hedge_from_solution_holding(
    solution: &BsdeSolution,
    bundle: &PathBundle,
    params: &ModelParams,
    maturities: [f64; 2],
) -> Result<(Strategy, usize)> {
    recover_hedge(solution, bundle, params, maturities, true)
}

fn recover_hedge(
    solution: &BsdeSolution,
    bundle: &PathBundle,
    params: &ModelParams,
    maturities: [f64; 2],
    hold: bool,
) -> Result<(Strategy, usize)> {
    params.validate_for_hedging()?;
    let n = bundle.n_steps();
    let mut out = Strategy::zeros(bundle.n_nodes(), bundle.n_paths());
    let mut held = 0;
    for p in 0..bundle.n_paths() {
        for k in 0..solution.stop[p].min(n) {
            let zk = [
                solution.z[0][[k, p]],
                solution.z[1][[k, p]],
                solution.z[2][[k, p]],
            ];
            if zk == [0.0; 3] {
                continue;
            }
            let state = NodeState::of(bundle, k, p);
            let psi = psi_matrix(&state, params, maturities);
            let h = match invert_hedge(zk, &psi, state.u, params, None) {
                Ok(h) => h,
                Err(LabError::SingularSystem(_)) if hold => {
                    held += 1;
                    let prev = |i: usize| if k == 0 { 0.0 } else { out.chi[i][[k - 1, p]] };
                    crate::swaps::Hedge {
                        x: zk[0] / psi.m[(2, 0)],
                        chi: [prev(0), prev(1)],
                    }
                }
                Err(e) => return Err(e),
            };
            out.x[[k, p]] = h.x;
            out.chi[0][[k, p]] = h.chi[0];
            out.chi[1][[k, p]] = h.chi[1];
        }
    }
    Ok((out, held))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::TimeGrid;
    use crate::ledger::run_ledger;
    use crate::model::{simulate_paths, VolFn};
    use crate::swaps::{SwapLiquidity, SwapSpec, SwapTermSheet};
    use approx::assert_abs_diff_eq;

    fn call() -> TruncatedPayoff {
        truncate_payoff(Payoff::ClippedCall { strike: 100.0, cap: 20.0 }, 1000.0)
    }

    #[test]
    fn truncation_follows_the_literal_rule() {
        let h = truncate_payoff(Payoff::Identity, 50.0);
        assert_eq!(h.eval(30.0), 30.0);
        assert_eq!(h.eval(60.0), 50.0);
        assert_eq!(h.eval(-60.0), 50.0);
        assert_eq!(h.bound(), 50.0);
        assert_eq!(call().bound(), 20.0);
        let custom = truncate_payoff(
            Payoff::Custom { f: Arc::new(|s: f64| (s / 10.0).sin()), df: None, lipschitz: 0.1 },
            50.0,
        );
        assert_abs_diff_eq!(custom.bound(), 1.0, epsilon = 1e-6);
        assert!(custom.payoff.derivative(1.0).is_none());
    }

    #[test]
    fn clipped_call_derivative_is_right_continuous() {
        let h = Payoff::ClippedCall { strike: 100.0, cap: 20.0 };
        assert_eq!(h.derivative(99.9), Some(0.0));
        assert_eq!(h.derivative(100.0), Some(1.0));
        assert_eq!(h.derivative(119.9), Some(1.0));
        assert_eq!(h.derivative(120.0), Some(0.0));
    }

    #[test]
    fn stopping_examples() {
        let p = ModelParams::default();
        let mut b = simulate_paths(&p, &TimeGrid::new(1.0, 16).unwrap(), 20, 1).unwrap();
        assert!(stopping_index(&b, 100.0).iter().all(|&k| k == 16));
        b.sigma[[7, 3]] = 150.0;
        b.sigma[[9, 3]] = 150.0;
        assert_eq!(stopping_index(&b, 100.0)[3], 7);
        b.s[[2, 4]] = 0.001;
        assert_eq!(stopping_index(&b, 100.0)[4], 2);
    }

    #[test]
    fn stopped_fraction_falls_as_l_grows() {
        let p = ModelParams {
            phi: VolFn::Power { coef: 1.0, exponent: 0.5 },
            theta: VolFn::Power { coef: 1.0, exponent: 0.5 },
            ..ModelParams::default()
        };
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 32).unwrap(), 2000, 2).unwrap();
        let frac = |l: f64| stopping_index(&b, l).iter().filter(|&&k| k < 32).count();
        let counts: Vec<usize> = [6.0, 12.0, 24.0, 48.0].iter().map(|&l| frac(l)).collect();
        assert!(counts.windows(2).all(|w| w[1] <= w[0]), "{counts:?}");
        assert!(counts[0] > counts[3], "{counts:?}");
    }

    #[test]
    fn terminal_reductions() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 16).unwrap(), 50, 3).unwrap();
        let hat = Array2::from_elem(b.s.dim(), 0.7);
        let st = b.s.row(16).to_vec();
        assert_eq!(impact_adjusted_price(&b, 2.0, 0.0, Some(&hat)).unwrap(), st);
        assert_eq!(impact_adjusted_price(&b, 2.0, 0.0, None).unwrap(), st);
        assert_eq!(impact_adjusted_price(&b, 2.0, 1.0, None), Err(LabError::MissingHatHedge));
        let b0 = simulate_paths(&ModelParams { epsilon: 0.0, ..p.clone() }, &b.grid, 50, 3).unwrap();
        assert_eq!(impact_adjusted_price(&b0, 2.0, 1.0, Some(&hat)).unwrap(), st);
        let one = impact_adjusted_price(&b, 0.5, 1.0, Some(&hat)).unwrap();
        let two = impact_adjusted_price(&b, 1.0, 1.0, Some(&hat)).unwrap();
        for q in 0..50 {
            assert_abs_diff_eq!(two[q] - st[q], 2.0 * (one[q] - st[q]), epsilon = 1e-10);
        }
        let t = terminal_condition(&b, &call(), 3.0, 1.0, Some(&hat)).unwrap();
        assert_abs_diff_eq!(t.values[0], 3.0 * call().eval(t.s_tilde[0]), epsilon = 1e-12);
    }

    #[test]
    fn constant_terminal_gives_constant_solution() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 16).unwrap(), 500, 4).unwrap();
        let sol = solve_quadratic_bsde(&b, &DriverState::new(&p), &vec![2.5; 500], &BsdeConfig::default()).unwrap();
        for v in sol.y.iter() {
            assert_abs_diff_eq!(*v, 2.5, epsilon = 1e-12);
        }
        for zj in &sol.z {
            assert!(zj.iter().all(|v| v.abs() < 1e-9));
        }
        assert!(!sol.degenerate_run);
    }

    #[test]
    fn deterministic_factors_self_replicate_the_stock() {
        let p = ModelParams {
            gamma: 0.0,
            alpha: 0.0,
            epsilon: 0.0,
            phi: VolFn::Zero,
            theta: VolFn::Zero,
            ..ModelParams::default()
        };
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 32).unwrap(), 4000, 5).unwrap();
        let h = truncate_payoff(Payoff::Identity, 1e6);
        let t = terminal_condition(&b, &h, 1.0, 0.0, None).unwrap();
        let sol = solve_quadratic_bsde(&b, &DriverState::new(&p), &t.values, &BsdeConfig::default()).unwrap();
        assert!((sol.y0 - p.s0).abs() < 3.0 * sol.y0_stderr, "{} +- {}", sol.y0, sol.y0_stderr);
        let x = stock_hedge(&sol, &b, &p);
        // Per-node estimates carry O(1/sqrt(paths)) noise; average over the grid.
        let mean_x = x.slice(ndarray::s![..32, ..]).sum() / (32.0 * 4000.0);
        assert_abs_diff_eq!(mean_x, 1.0, epsilon = 0.02);
        for q in 0..20 {
            assert_abs_diff_eq!(sol.y[[20, q]], b.s[[20, q]], epsilon = 1.0);
        }
    }

    #[test]
    fn mean_identity_matches_regression_value() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 16).unwrap(), 3000, 6).unwrap();
        let hat = Array2::from_elem(b.s.dim(), 0.5);
        let t = terminal_condition(&b, &call(), 4.0, 1.0, Some(&hat)).unwrap();
        let sol = solve_quadratic_bsde(&b, &DriverState::new(&p), &t.values, &BsdeConfig::default()).unwrap();
        assert_abs_diff_eq!(sol.y0, sol.y[[0, 0]], epsilon = 1e-9 * sol.y0.abs().max(1.0));
    }

    #[test]
    fn zero_lambda_matches_independent_monte_carlo() {
        let p = ModelParams { lambda_impact: 0.0, ..ModelParams::default() };
        let grid = TimeGrid::new(1.0, 32).unwrap();
        let b = simulate_paths(&p, &grid, 20_000, 7).unwrap();
        let t = terminal_condition(&b, &call(), 1.0, 0.0, None).unwrap();
        let sol = solve_quadratic_bsde(&b, &DriverState::new(&p), &t.values, &BsdeConfig::default()).unwrap();
        let other = simulate_paths(&p, &grid, 20_000, 8).unwrap();
        let plain: Vec<f64> = other.s.row(32).iter().map(|&s| call().eval(s)).collect();
        let (m, se) = mean_stderr(&plain);
        let comb = (se * se + sol.y0_stderr.powi(2)).sqrt();
        assert!((sol.y0 - m).abs() < 3.0 * comb, "{} vs {m} ({comb})", sol.y0);
    }

    #[test]
    fn nested_monte_carlo_checks_interior_values() {
        // Smooth claim so the polynomial basis can represent the conditional value.
        let p = ModelParams { lambda_impact: 0.0, ..ModelParams::default() };
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let b = simulate_paths(&p, &grid, 60_000, 9).unwrap();
        let h = truncate_payoff(
            Payoff::Custom { f: Arc::new(|s: f64| 0.01 * s * s), df: Some(Arc::new(|s: f64| 0.02 * s)), lipschitz: 20.0 },
            1000.0,
        );
        let t = terminal_condition(&b, &h, 1.0, 0.0, None).unwrap();
        let sol = solve_quadratic_bsde(&b, &DriverState::new(&p), &t.values, &BsdeConfig::default()).unwrap();
        let k = 8;
        // Central states: the regression's leverage, and so its noise, is smallest there.
        let mut order: Vec<usize> = (0..60_000).collect();
        order.sort_by(|&a, &c| (b.s[[k, a]] - p.s0).abs().total_cmp(&(b.s[[k, c]] - p.s0).abs()));
        for &q in order.iter().step_by(500).take(4) {
            let inner = ModelParams {
                s0: b.s[[k, q]],
                u0: b.u[[k, q]].max(1e-8),
                v0: b.v[[k, q]].max(1e-8),
                ..p.clone()
            };
            let ib = simulate_paths(&inner, &TimeGrid::new(0.5, 8).unwrap(), 20_000, 100 + q as u64).unwrap();
            let vals: Vec<f64> = ib.s.row(8).iter().map(|&s| h.eval(s)).collect();
            let (m, se) = mean_stderr(&vals);
            let err = (sol.y[[k, q]] - m).abs();
            // Inner MC error plus a slack for the regression's own sampling noise.
            assert!(err < 3.0 * se + 0.01 * m, "path {q}: {} vs {m} +- {se}", sol.y[[k, q]]);
        }
    }

    #[test]
    fn driver_raises_value_with_lambda() {
        let base = ModelParams::default();
        let b = simulate_paths(&base, &TimeGrid::new(1.0, 16).unwrap(), 4000, 10).unwrap();
        let t = terminal_condition(&b, &call(), 5.0, 0.0, None).unwrap();
        let y0: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&l| {
                let p = ModelParams { lambda_impact: l, ..base.clone() };
                solve_quadratic_bsde(&b, &DriverState::new(&p), &t.values, &BsdeConfig::default())
                    .unwrap()
                    .y0
            })
            .collect();
        assert!(y0[0] < y0[1] && y0[1] < y0[2], "{y0:?}");
    }

    #[test]
    fn larger_terminal_gives_larger_value() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 16).unwrap(), 4000, 11).unwrap();
        let hat = Array2::from_elem(b.s.dim(), 0.5);
        let t = terminal_condition(&b, &call(), 5.0, 1.0, Some(&hat)).unwrap();
        let bumped: Vec<f64> = t
            .values
            .iter()
            .zip(b.s.row(16))
            .map(|(v, s)| v + 0.5 * (s / 100.0 - 1.0).max(0.0))
            .collect();
        let cfg = BsdeConfig::default();
        let lo = solve_quadratic_bsde(&b, &DriverState::new(&p), &t.values, &cfg).unwrap();
        let hi = solve_quadratic_bsde(&b, &DriverState::new(&p), &bumped, &cfg).unwrap();
        assert!(hi.y0 >= lo.y0 - 2.0 * lo.y0_stderr);
        assert!(hi.y0 > lo.y0);
    }

    #[test]
    fn picard_deltas_contract() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 16).unwrap(), 3000, 12).unwrap();
        let hat = Array2::from_elem(b.s.dim(), 0.5);
        let t = terminal_condition(&b, &call(), 10.0, 1.0, Some(&hat)).unwrap();
        let cfg = BsdeConfig { picard_tol: 0.0, ..BsdeConfig::default() };
        let sol = solve_quadratic_bsde(&b, &DriverState::new(&p), &t.values, &cfg).unwrap();
        for d in sol.diagnostics.iter().filter(|d| d.step > 0) {
            let dl = &d.picard_deltas;
            for i in 2..dl.len() {
                assert!(dl[i] <= dl[i - 1] || dl[i] < 1e-12, "step {}: {dl:?}", d.step);
            }
        }
        let mut buf = Vec::new();
        sol.write_diagnostics(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 17);
    }

    #[test]
    fn picard_divergence_is_detected() {
        assert!(picard_diverging(&[1.0, 2.0, 3.0, 4.0]));
        assert!(!picard_diverging(&[1.0, 2.0, 3.0]));
        assert!(!picard_diverging(&[4.0, 2.0, 3.0, 4.0]));
    }

    #[test]
    fn too_few_paths_are_rejected() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 4).unwrap(), 5, 1).unwrap();
        let err = solve_quadratic_bsde(&b, &DriverState::new(&p), &[1.0, 2.0, 3.0, 4.0, 5.0], &BsdeConfig::default());
        assert!(matches!(err, Err(LabError::RegressionRankDeficient { .. })));
    }

    #[test]
    fn all_paths_stopped_at_start_is_flagged() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 4).unwrap(), 30, 1).unwrap();
        let term: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let cfg = BsdeConfig { l: 1.01, ..BsdeConfig::default() };
        let sol = solve_quadratic_bsde(&b, &DriverState::new(&p), &term, &cfg).unwrap();
        assert!(sol.degenerate_run);
        assert_abs_diff_eq!(sol.y0, 14.5, epsilon = 1e-12);
        assert!(sol.z.iter().all(|z| z.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn holding_variant_survives_degenerate_factors() {
        let p = ModelParams::default();
        let mut b = simulate_paths(&p, &TimeGrid::new(1.0, 8).unwrap(), 40, 1).unwrap();
        b.u[[3, 0]] = -1e-4;
        let term: Vec<f64> = b.s.row(8).iter().map(|s| s * 0.5).collect();
        let sol = solve_quadratic_bsde(&b, &DriverState::new(&p), &term, &BsdeConfig { degree: 1, ..BsdeConfig::default() }).unwrap();
        assert!(matches!(hedge_from_solution(&sol, &b, &p, [1.5, 2.0]), Err(LabError::SingularSystem(_))));
        let (st, held) = hedge_from_solution_holding(&sol, &b, &p, [1.5, 2.0]).unwrap();
        assert_eq!(held, 1);
        assert_eq!(st.chi[0][[3, 0]], st.chi[0][[2, 0]]);
    }

    #[test]
    fn zero_z_gives_zero_hedge() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 8).unwrap(), 40, 1).unwrap();
        let sol = solve_quadratic_bsde(&b, &DriverState::new(&p), &vec![1.0; 40], &BsdeConfig::default()).unwrap();
        let h = hedge_from_solution(&sol, &b, &p, [1.5, 2.0]).unwrap();
        assert!(h.x.iter().chain(h.chi[0].iter()).chain(h.chi[1].iter()).all(|&v| v == 0.0));
    }

    fn replay_error(n_paths: usize) -> f64 {
        let p = ModelParams { epsilon: 0.0, lambda_impact: 0.0, ..ModelParams::default() };
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 64).unwrap(), n_paths, 13).unwrap();
        let h = truncate_payoff(Payoff::Identity, 1e6);
        let t = terminal_condition(&b, &h, 1.0, 0.0, None).unwrap();
        let sol = solve_quadratic_bsde(&b, &DriverState::new(&p), &t.values, &BsdeConfig::default()).unwrap();
        // The claim loads on the stock only; the swap legs would just hedge regression noise.
        let st = Strategy::stock_only(stock_hedge(&sol, &b, &p));
        let sheet = SwapTermSheet {
            swaps: [SwapSpec { maturity: 1.5, strike: 0.04 }, SwapSpec { maturity: 2.0, strike: 0.04 }],
            liquidity: SwapLiquidity::default(),
        };
        let r = run_ledger(&b, &p, &st, &sheet).unwrap();
        let z = r.total_gains();
        (0..n_paths).map(|q| (sol.y0 + z[[64, q]] - t.values[q]).abs()).sum::<f64>() / n_paths as f64
    }

    #[test]
    fn frictionless_ledger_replay_tracks_the_claim() {
        // Replay error comes from sampling noise in the regressed deltas, so it shrinks like n^-1/2.
        let coarse = replay_error(4000);
        let fine = replay_error(16_000);
        assert!(fine < coarse, "{coarse} -> {fine}");
        let ratio = coarse / fine;
        assert!(ratio > 1.5 && ratio < 2.8, "{coarse} -> {fine}");
        assert!(fine < 0.01 * 100.0 * 1.5, "{fine}");
    }
}

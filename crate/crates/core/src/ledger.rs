//! Self-financing accounting with an impacted stock and two swaps.
//!
//! Cash is tracked twice: once as the plain sum of trade outlays against the
//! impacted quotes, once from the exogenous prices via
//!
//! ```text
//! Y_t + X_t (S0_{t+} - lambda M_t X_t) = Y_{0-} + X_{0-} (S_0 - lambda M_0 X_{0-})
//!     + sum X_{i-1} dS_i - lambda sum X_{i-1}^2 dM_i - (1 - lambda) sum M_i (dX_i)^2
//! ```
//!
//! plus the analogous swap terms (constant depth, so no `dM'` term). On a
//! grid the two agree exactly up to rounding.

use std::io::Write;

use ndarray::{s, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::book::{impacted_quote_path, impacted_quotes, Depth, ImpactedQuotePath};
use crate::error::{LabError, Result};
use crate::kernel::TimeGrid;
use crate::model::{simulate_paths, ModelParams, PathBundle};
use crate::par::mean_stderr;
use crate::report::fmt17;
use crate::swaps::{swap_price_paths, SwapLiquidity, SwapTermSheet};

/// Holdings after the trade at each node, `[node, path]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Strategy {
    pub x: Array2<f64>,
    pub chi: [Array2<f64>; 2],
    pub x_pre: f64,
    pub chi_pre: [f64; 2],
    /// Cash before the first trade.
    pub y0: f64,
}

impl Strategy {
    pub fn zeros(n_nodes: usize, n_paths: usize) -> Self {
        Self {
            x: Array2::zeros((n_nodes, n_paths)),
            chi: [
                Array2::zeros((n_nodes, n_paths)),
                Array2::zeros((n_nodes, n_paths)),
            ],
            x_pre: 0.0,
            chi_pre: [0.0, 0.0],
            y0: 0.0,
        }
    }

    pub fn stock_only(x: Array2<f64>) -> Self {
        let dim = x.dim();
        Self {
            x,
            ..Self::zeros(dim.0, dim.1)
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_paths(&self) -> usize {
        self.x.ncols()
    }

    /// Starts flat and ends flat after the final liquidation trade.
    pub fn is_closed(&self) -> bool {
        let last = self.n_nodes() - 1;
        self.x_pre == 0.0
            && self.chi_pre == [0.0, 0.0]
            && self.x.row(last).iter().all(|&v| v == 0.0)
            && self.chi.iter().all(|c| c.row(last).iter().all(|&v| v == 0.0))
    }

    pub fn check_shape(&self, bundle: &PathBundle) -> Result<()> {
        let want = (bundle.n_nodes(), bundle.n_paths());
        for arr in [&self.x, &self.chi[0], &self.chi[1]] {
            if arr.dim() != want {
                return Err(LabError::GridMismatch(format!(
                    "strategy {:?} vs bundle {:?}",
                    arr.dim(),
                    want
                )));
            }
        }
        if self.x.iter().chain(self.chi[0].iter()).chain(self.chi[1].iter()).any(|v| !v.is_finite()) {
            return Err(LabError::InvalidParams("strategy has non-finite holdings".into()));
        }
        Ok(())
    }

    #[inline]
    fn dx(&self, k: usize, p: usize) -> f64 {
        let prev = if k == 0 { self.x_pre } else { self.x[[k - 1, p]] };
        self.x[[k, p]] - prev
    }

    #[inline]
    fn dchi(&self, i: usize, k: usize, p: usize) -> f64 {
        let prev = if k == 0 {
            self.chi_pre[i]
        } else {
            self.chi[i][[k - 1, p]]
        };
        self.chi[i][[k, p]] - prev
    }
}

/// Value of a position unwound continuously: `X (S0 - lambda M X)`.
pub fn liquidation_value(x: f64, quote_post: f64, m: f64, lambda: f64) -> f64 {
    x * (quote_post - lambda * m * x)
}

/// Cash from closing `x` in one block trade at the pre-trade quote.
pub fn block_liquidation_value(x: f64, quote: f64, m: f64, lambda: f64) -> f64 {
    liquidation_value(x, quote, m, lambda) - (1.0 - lambda) * m * x * x
}

/// Per-path attribution, `[node, path]`.
#[derive(Debug, Clone)]
pub struct LedgerReport {
    pub y_direct: Array2<f64>,
    pub y_decomposed: Array2<f64>,
    /// Running `sum X dS`.
    pub gains: Array2<f64>,
    /// Running `-lambda sum X^2 dM`.
    pub impact_term: Array2<f64>,
    /// Running `-(1 - lambda) sum M (dX)^2`.
    pub quad_cost: Array2<f64>,
    /// Running `sum chi dG`.
    pub swap_gains: Array2<f64>,
    /// Running `-(1 - lambda_i) sum M'_i (dchi)^2`.
    pub swap_quad_cost: Array2<f64>,
    /// `Y + ` liquidation value of the open positions.
    pub liq_value: Array2<f64>,
    /// Max over nodes of `|direct - decomposed| / max(1, |direct|, |decomposed|)`.
    pub discrepancy: Vec<f64>,
}

impl LedgerReport {
    /// Decomposed gain process `Z`: every term except the liquidation adjustments.
    pub fn total_gains(&self) -> Array2<f64> {
        &self.gains + &self.impact_term + &self.quad_cost + &self.swap_gains + &self.swap_quad_cost
    }

    pub fn max_discrepancy(&self) -> f64 {
        self.discrepancy.iter().cloned().fold(0.0, f64::max)
    }

    /// Writes `path,step,t,X,chi1,chi2,Y,gains,impact_term,quad_cost,liq_value` rows.
    pub fn write_csv<W: Write>(&self, mut out: W, grid: &TimeGrid, strategy: &Strategy, first_path: usize) -> std::io::Result<()> {
        writeln!(out, "path,step,t,X,chi1,chi2,Y,gains,impact_term,quad_cost,liq_value")?;
        let (n_nodes, n_paths) = self.y_direct.dim();
        for p in 0..n_paths {
            for k in 0..n_nodes {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    first_path + p,
                    k,
                    fmt17(grid.time(k)),
                    fmt17(strategy.x[[k, p]]),
                    fmt17(strategy.chi[0][[k, p]]),
                    fmt17(strategy.chi[1][[k, p]]),
                    fmt17(self.y_direct[[k, p]]),
                    fmt17(self.gains[[k, p]]),
                    fmt17(self.impact_term[[k, p]]),
                    fmt17(self.quad_cost[[k, p]]),
                    fmt17(self.liq_value[[k, p]]),
                )?;
            }
        }
        Ok(())
    }
}

fn swap_quotes(
    prices: &[Array2<f64>; 2],
    strategy: &Strategy,
    liquidity: &SwapLiquidity,
) -> Result<[ImpactedQuotePath; 2]> {
    let q0 = impacted_quotes(
        prices[0].view(),
        Depth::Constant(liquidity.depth[0]),
        liquidity.lambda[0],
        strategy.chi[0].view(),
        strategy.chi_pre[0],
    )?;
    let q1 = impacted_quotes(
        prices[1].view(),
        Depth::Constant(liquidity.depth[1]),
        liquidity.lambda[1],
        strategy.chi[1].view(),
        strategy.chi_pre[1],
    )?;
    Ok([q0, q1])
}

/// Cash account from the trade outlays: each trade pays the pre-trade quote plus
/// the book slope times its size.
pub fn cash_direct(
    strategy: &Strategy,
    quotes: &ImpactedQuotePath,
    bundle: &PathBundle,
    swaps: &SwapLiquidity,
    swap_prices: &[Array2<f64>; 2],
) -> Result<Array2<f64>> {
    strategy.check_shape(bundle)?;
    if quotes.pre.dim() != strategy.x.dim() {
        return Err(LabError::GridMismatch("quotes do not match strategy".into()));
    }
    let sq = swap_quotes(swap_prices, strategy, swaps)?;
    let (n_nodes, n_paths) = strategy.x.dim();
    let mut y = Array2::zeros((n_nodes, n_paths));
    for p in 0..n_paths {
        let mut cash = strategy.y0;
        for k in 0..n_nodes {
            let dx = strategy.dx(k, p);
            cash -= dx * (quotes.pre[[k, p]] + bundle.m[[k, p]] * dx);
            for i in 0..2 {
                let dc = strategy.dchi(i, k, p);
                cash -= dc * (sq[i].pre[[k, p]] + swaps.depth[i] * dc);
            }
            y[[k, p]] = cash;
        }
    }
    Ok(y)
}

/// Decomposed terms of the cash account, computed from `S`, `M` and `G` only.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub gains: Array2<f64>,
    pub impact_term: Array2<f64>,
    pub quad_cost: Array2<f64>,
    pub swap_gains: Array2<f64>,
    pub swap_quad_cost: Array2<f64>,
    /// Liquidation value of the open positions after the trade at each node.
    pub position_value: Array2<f64>,
    pub y: Array2<f64>,
}

pub fn cash_decomposed(
    strategy: &Strategy,
    bundle: &PathBundle,
    lambda: f64,
    swaps: &SwapLiquidity,
    swap_prices: &[Array2<f64>; 2],
) -> Result<Decomposition> {
    strategy.check_shape(bundle)?;
    let (n_nodes, n_paths) = strategy.x.dim();
    let zeros = || Array2::<f64>::zeros((n_nodes, n_paths));
    let mut out = Decomposition {
        gains: zeros(),
        impact_term: zeros(),
        quad_cost: zeros(),
        swap_gains: zeros(),
        swap_quad_cost: zeros(),
        position_value: zeros(),
        y: zeros(),
    };
    let (s, m) = (&bundle.s, &bundle.m);
    for p in 0..n_paths {
        let x_pre = strategy.x_pre;
        let mut start = liquidation_value(x_pre, s[[0, p]], m[[0, p]], lambda);
        for i in 0..2 {
            start += liquidation_value(
                strategy.chi_pre[i],
                swap_prices[i][[0, p]],
                swaps.depth[i],
                swaps.lambda[i],
            );
        }
        let (mut gains, mut impact, mut quad, mut sgains, mut squad) = (0.0, 0.0, 0.0, 0.0, 0.0);
        // Summation by parts of sum_{i<=k} M_i dX_i.
        let mut parts = -m[[0, p]] * x_pre;
        let swap_parts = [
            -swaps.depth[0] * strategy.chi_pre[0],
            -swaps.depth[1] * strategy.chi_pre[1],
        ];
        for k in 0..n_nodes {
            if k > 0 {
                let xl = strategy.x[[k - 1, p]];
                let dm = m[[k, p]] - m[[k - 1, p]];
                gains += xl * (s[[k, p]] - s[[k - 1, p]]);
                impact -= lambda * xl * xl * dm;
                parts -= xl * dm;
                for i in 0..2 {
                    sgains += strategy.chi[i][[k - 1, p]]
                        * (swap_prices[i][[k, p]] - swap_prices[i][[k - 1, p]]);
                }
            }
            let dx = strategy.dx(k, p);
            quad -= (1.0 - lambda) * m[[k, p]] * dx * dx;
            for i in 0..2 {
                let dc = strategy.dchi(i, k, p);
                squad -= (1.0 - swaps.lambda[i]) * swaps.depth[i] * dc * dc;
            }

            let xk = strategy.x[[k, p]];
            let quote_post = s[[k, p]] + 2.0 * lambda * (parts + m[[k, p]] * xk);
            let mut held = liquidation_value(xk, quote_post, m[[k, p]], lambda);
            for i in 0..2 {
                let ck = strategy.chi[i][[k, p]];
                let sp = swap_parts[i] + swaps.depth[i] * ck;
                let g_post = swap_prices[i][[k, p]] + 2.0 * swaps.lambda[i] * sp;
                held += liquidation_value(ck, g_post, swaps.depth[i], swaps.lambda[i]);
            }

            out.gains[[k, p]] = gains;
            out.impact_term[[k, p]] = impact;
            out.quad_cost[[k, p]] = quad;
            out.swap_gains[[k, p]] = sgains;
            out.swap_quad_cost[[k, p]] = squad;
            out.position_value[[k, p]] = held;
            out.y[[k, p]] = strategy.y0 + start + gains + impact + quad + sgains + squad - held;
        }
    }
    Ok(out)
}

/// Both cash routes and their discrepancy.
pub fn run_ledger(
    bundle: &PathBundle,
    params: &ModelParams,
    strategy: &Strategy,
    sheet: &SwapTermSheet,
) -> Result<LedgerReport> {
    let lambda = params.lambda_impact;
    let swap_prices = swap_price_paths(bundle, params, sheet)?;
    let quotes = impacted_quote_path(bundle, strategy, lambda)?;
    let y_direct = cash_direct(strategy, &quotes, bundle, &sheet.liquidity, &swap_prices)?;
    let dec = cash_decomposed(strategy, bundle, lambda, &sheet.liquidity, &swap_prices)?;
    let discrepancy = (0..bundle.n_paths())
        .map(|p| {
            (0..bundle.n_nodes())
                .map(|k| {
                    let (a, b) = (y_direct[[k, p]], dec.y[[k, p]]);
                    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
                })
                .fold(0.0, f64::max)
        })
        .collect();
    let liq_value = &y_direct + &dec.position_value;
    Ok(LedgerReport {
        y_direct,
        y_decomposed: dec.y,
        gains: dec.gains,
        impact_term: dec.impact_term,
        quad_cost: dec.quad_cost,
        swap_gains: dec.swap_gains,
        swap_quad_cost: dec.swap_quad_cost,
        liq_value,
        discrepancy,
    })
}

/// Per path: the running gain process never falls below `-a`.
pub fn check_admissible(gains: &Array2<f64>, a: f64) -> Vec<bool> {
    (0..gains.ncols())
        .map(|p| gains.column(p).iter().all(|&g| g >= -a))
        .collect()
}

/// Predictable position rules used by the harness and the CLI.
///
/// Times are fractions of the horizon; positions are decided at node `k` from
/// information available at `k`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StrategyRule {
    Zero,
    /// Hold `units` from `enter` until `exit`.
    Block { units: f64, enter: f64, exit: f64 },
    /// Linear build-up to `peak` at mid-horizon, linear unwind.
    Ramp { peak: f64 },
    /// `+units, -units, ...` on alternate nodes.
    Alternating { units: f64 },
    /// `scale * (Sigma_k / Sigma_0 - 1)`, clipped to `[-cap, cap]`.
    VolTiming { scale: f64, cap: f64 },
    /// `scale * (S_k / S_0 - 1)`, clipped.
    Momentum { scale: f64, cap: f64 },
    /// `scale * (M_k / M_0 - 1)`, clipped.
    DepthTiming { scale: f64, cap: f64 },
    /// Random piecewise-constant holdings independent of the market.
    Random { seed: u64, max_units: f64, switch_prob: f64 },
}

impl StrategyRule {
    pub fn name(&self) -> String {
        match self {
            StrategyRule::Zero => "zero".into(),
            StrategyRule::Block { units, enter, exit } => format!("block({units},{enter},{exit})"),
            StrategyRule::Ramp { peak } => format!("ramp({peak})"),
            StrategyRule::Alternating { units } => format!("alternating({units})"),
            StrategyRule::VolTiming { scale, cap } => format!("vol_timing({scale},{cap})"),
            StrategyRule::Momentum { scale, cap } => format!("momentum({scale},{cap})"),
            StrategyRule::DepthTiming { scale, cap } => format!("depth_timing({scale},{cap})"),
            StrategyRule::Random { seed, max_units, switch_prob } => {
                format!("random({seed},{max_units},{switch_prob})")
            }
        }
    }

    fn position(&self, bundle: &PathBundle, k: usize, p: usize, rng: &mut ChaCha8Rng, prev: f64) -> f64 {
        let n = bundle.n_steps();
        let frac = k as f64 / n as f64;
        let clip = |v: f64, cap: f64| v.clamp(-cap, cap);
        match *self {
            StrategyRule::Zero => 0.0,
            StrategyRule::Block { units, enter, exit } => {
                if frac >= enter && frac < exit {
                    units
                } else {
                    0.0
                }
            }
            StrategyRule::Ramp { peak } => peak * (1.0 - (2.0 * frac - 1.0).abs()),
            StrategyRule::Alternating { units } => {
                if k % 2 == 0 {
                    units
                } else {
                    -units
                }
            }
            StrategyRule::VolTiming { scale, cap } => {
                clip(scale * (bundle.sigma[[k, p]] / bundle.sigma[[0, p]] - 1.0), cap)
            }
            StrategyRule::Momentum { scale, cap } => {
                clip(scale * (bundle.s[[k, p]] / bundle.s[[0, p]] - 1.0), cap)
            }
            StrategyRule::DepthTiming { scale, cap } => {
                let m0 = bundle.m[[0, p]];
                if m0 > 0.0 {
                    clip(scale * (bundle.m[[k, p]] / m0 - 1.0), cap)
                } else {
                    0.0
                }
            }
            StrategyRule::Random { max_units, switch_prob, .. } => {
                if k == 0 || rng.random::<f64>() < switch_prob {
                    (rng.random::<f64>() * 2.0 - 1.0) * max_units
                } else {
                    prev
                }
            }
        }
    }

    /// Closed stock-only strategy on the bundle's grid. With `stop_out = Some(a)`,
    /// a path is flattened for good once its running gain before a trade drops below `-a/2`.
    pub fn build(&self, bundle: &PathBundle, lambda: f64, stop_out: Option<f64>) -> Strategy {
        let (n_nodes, n_paths) = (bundle.n_nodes(), bundle.n_paths());
        let seed = match self {
            StrategyRule::Random { seed, .. } => *seed,
            _ => 0,
        };
        let columns: Vec<Vec<f64>> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((bundle.first_path + p) as u64);
                let mut col = vec![0.0; n_nodes];
                let mut prev = 0.0;
                let mut gain = 0.0;
                let mut stopped = false;
                for k in 0..n_nodes {
                    let raw = self.position(bundle, k, p, &mut rng, prev);
                    if k > 0 {
                        let dm = bundle.m[[k, p]] - bundle.m[[k - 1, p]];
                        gain += prev * (bundle.s[[k, p]] - bundle.s[[k - 1, p]]) - lambda * prev * prev * dm;
                    }
                    if let Some(a) = stop_out {
                        stopped |= gain < -0.5 * a;
                    }
                    let x = if k + 1 == n_nodes || stopped { 0.0 } else { raw };
                    gain -= (1.0 - lambda) * bundle.m[[k, p]] * (x - prev).powi(2);
                    col[k] = x;
                    prev = if stopped { 0.0 } else { raw };
                    if k + 1 == n_nodes || stopped {
                        prev = x;
                    }
                }
                col
            })
            .collect();
        let mut x = Array2::zeros((n_nodes, n_paths));
        for (p, col) in columns.into_iter().enumerate() {
            x.slice_mut(s![.., p]).assign(&ndarray::Array1::from(col));
        }
        Strategy::stock_only(x)
    }
}

/// Twenty closed strategies mixing deterministic, state-dependent and churning rules.
pub fn default_family() -> Vec<StrategyRule> {
    vec![
        StrategyRule::Block { units: 1.0, enter: 0.0, exit: 1.0 },
        StrategyRule::Block { units: -1.0, enter: 0.0, exit: 1.0 },
        StrategyRule::Block { units: 5.0, enter: 0.25, exit: 0.75 },
        StrategyRule::Block { units: -5.0, enter: 0.1, exit: 0.5 },
        StrategyRule::Block { units: 10.0, enter: 0.5, exit: 0.9 },
        StrategyRule::Ramp { peak: 4.0 },
        StrategyRule::Ramp { peak: -4.0 },
        StrategyRule::Ramp { peak: 20.0 },
        StrategyRule::Alternating { units: 1.0 },
        StrategyRule::Alternating { units: 0.2 },
        StrategyRule::VolTiming { scale: 10.0, cap: 5.0 },
        StrategyRule::VolTiming { scale: -10.0, cap: 5.0 },
        StrategyRule::Momentum { scale: 20.0, cap: 5.0 },
        StrategyRule::Momentum { scale: -20.0, cap: 5.0 },
        StrategyRule::DepthTiming { scale: 5.0, cap: 5.0 },
        StrategyRule::DepthTiming { scale: -5.0, cap: 5.0 },
        StrategyRule::Random { seed: 1, max_units: 3.0, switch_prob: 0.05 },
        StrategyRule::Random { seed: 2, max_units: 10.0, switch_prob: 0.2 },
        StrategyRule::Random { seed: 3, max_units: 1.0, switch_prob: 1.0 },
        StrategyRule::Zero,
    ]
}

#[derive(Debug, Clone, Serialize)]
pub struct HarnessRow {
    pub strategy: String,
    pub mean: f64,
    pub stderr: f64,
    pub violates: bool,
    pub admissible_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HarnessReport {
    pub n_paths: usize,
    pub admissibility_bound: f64,
    pub rows: Vec<HarnessRow>,
}

impl HarnessReport {
    pub fn any_violation(&self) -> bool {
        self.rows.iter().any(|r| r.violates)
    }
}

/// Monte Carlo falsification test of `E Z_T <= 0` for admissible strategies.
pub fn arbitrage_harness(
    family: &[StrategyRule],
    params: &ModelParams,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    admissibility_bound: f64,
) -> Result<HarnessReport> {
    if !params.submartingale_flag() {
        return Err(LabError::NotSubmartingaleParams);
    }
    let bundle = simulate_paths(params, grid, n_paths, seed)?;
    harness_on_bundle(family, params, &bundle, admissibility_bound)
}

pub fn harness_on_bundle(
    family: &[StrategyRule],
    params: &ModelParams,
    bundle: &PathBundle,
    admissibility_bound: f64,
) -> Result<HarnessReport> {
    let lambda = params.lambda_impact;
    let no_swaps = [
        Array2::zeros((bundle.n_nodes(), bundle.n_paths())),
        Array2::zeros((bundle.n_nodes(), bundle.n_paths())),
    ];
    let mut rows = Vec::with_capacity(family.len());
    for rule in family {
        let strategy = rule.build(bundle, lambda, Some(admissibility_bound));
        let dec = cash_decomposed(&strategy, bundle, lambda, &SwapLiquidity::default(), &no_swaps)?;
        let z = &dec.gains + &dec.impact_term + &dec.quad_cost;
        let last = bundle.n_nodes() - 1;
        let terminal: Vec<f64> = z.row(last).to_vec();
        let (mean, stderr) = mean_stderr(&terminal);
        let admissible = check_admissible(&z, admissibility_bound);
        let frac = admissible.iter().filter(|&&a| a).count() as f64 / admissible.len() as f64;
        rows.push(HarnessRow {
            strategy: rule.name(),
            mean,
            stderr,
            violates: mean - 3.0 * stderr > 0.0,
            admissible_fraction: frac,
        });
    }
    Ok(HarnessReport {
        n_paths: bundle.n_paths(),
        admissibility_bound,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::VolFn;
    use crate::swaps::SwapSpec;
    use approx::assert_abs_diff_eq;

    fn sheet() -> SwapTermSheet {
        SwapTermSheet {
            swaps: [
                SwapSpec { maturity: 1.5, strike: 0.05 },
                SwapSpec { maturity: 2.0, strike: 0.08 },
            ],
            liquidity: SwapLiquidity { depth: [2e-3, 5e-3], lambda: [0.3, 0.8] },
        }
    }

    fn constant_depth_params(lambda: f64) -> ModelParams {
        ModelParams {
            gamma: 0.0,
            alpha: 0.0,
            phi: VolFn::Zero,
            theta: VolFn::Zero,
            lambda_impact: lambda,
            epsilon: 1.0,
            ..ModelParams::default()
        }
    }

    #[test]
    fn no_trades_keep_cash() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 8).unwrap(), 4, 1).unwrap();
        let mut st = Strategy::zeros(b.n_nodes(), 4);
        st.y0 = 12.5;
        let r = run_ledger(&b, &p, &st, &sheet()).unwrap();
        assert!(r.y_direct.iter().all(|&y| y == 12.5));
        assert!(r.max_discrepancy() < 1e-12);
    }

    #[test]
    fn round_trip_hand_ledger() {
        for lambda in [0.0, 0.4, 1.0] {
            let p = constant_depth_params(lambda);
            let b = simulate_paths(&p, &TimeGrid::new(1.0, 4).unwrap(), 3, 2).unwrap();
            let m = b.m[[0, 0]];
            let mut st = Strategy::zeros(b.n_nodes(), 3);
            st.x.row_mut(1).fill(1.0);
            let r = run_ledger(&b, &p, &st, &sheet()).unwrap();
            for q in 0..3 {
                // Buy at S1 + M, quote moves to S + 2 lambda M, sell at S2 + 2 lambda M - M.
                let expect = b.s[[2, q]] - b.s[[1, q]] - 2.0 * (1.0 - lambda) * m;
                assert_abs_diff_eq!(r.y_direct[[4, q]], expect, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn round_trip_with_frozen_stock() {
        // Tiny variance freezes S; the ledger reduces to the spread argument.
        let p = ModelParams {
            u0: 1e-300,
            v0: 1e-300,
            ..constant_depth_params(1.0)
        };
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 4).unwrap(), 1, 2).unwrap();
        let mut st = Strategy::zeros(b.n_nodes(), 1);
        st.x.row_mut(1).fill(1.0);
        let r = run_ledger(&b, &p, &st, &sheet()).unwrap();
        assert_abs_diff_eq!(r.y_direct[[4, 0]], 0.0, epsilon = 1e-12);
        let p0 = ModelParams { lambda_impact: 0.0, ..p };
        let r0 = run_ledger(&b, &p0, &st, &sheet()).unwrap();
        assert_abs_diff_eq!(r0.y_direct[[4, 0]], -2.0 * b.m[[0, 0]], epsilon = 1e-12);
    }

    #[test]
    fn constant_holding_without_illiquidity_earns_price_moves() {
        let p = ModelParams { epsilon: 0.0, ..ModelParams::default() };
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 10).unwrap(), 5, 3).unwrap();
        let n = b.n_nodes();
        let mut x = Array2::from_elem((n, 5), 2.5);
        x.row_mut(n - 1).fill(0.0);
        let st = Strategy::stock_only(x);
        let r = run_ledger(&b, &p, &st, &sheet()).unwrap();
        for q in 0..5 {
            let expect = 2.5 * (b.s[[n - 1, q]] - b.s[[0, q]]);
            assert_abs_diff_eq!(r.y_direct[[n - 1, q]], expect, epsilon = 1e-9);
            assert_abs_diff_eq!(r.gains[[n - 1, q]], expect, epsilon = 1e-9);
            assert_eq!(r.impact_term[[n - 1, q]], 0.0);
            assert_eq!(r.quad_cost[[n - 1, q]], 0.0);
        }
    }

    #[test]
    fn cjp_limit_has_no_impact_term() {
        let p = ModelParams { lambda_impact: 0.0, ..ModelParams::default() };
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 16).unwrap(), 6, 3).unwrap();
        let st = StrategyRule::Random { seed: 9, max_units: 4.0, switch_prob: 0.3 }.build(&b, 0.0, None);
        let r = run_ledger(&b, &p, &st, &sheet()).unwrap();
        assert!(r.impact_term.iter().all(|&v| v == 0.0));
        assert!(r.quad_cost.iter().all(|&v| v <= 0.0));
        assert!(r.max_discrepancy() < 1e-9);
    }

    #[test]
    fn random_strategies_with_swaps_match_both_routes() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 64).unwrap(), 20, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..10 {
            let lambda = rng.random::<f64>();
            let pl = ModelParams { lambda_impact: lambda, ..p.clone() };
            let mut st = StrategyRule::Random { seed: trial, max_units: 5.0, switch_prob: 0.3 }.build(&b, lambda, None);
            for i in 0..2 {
                st.chi[i] = StrategyRule::Random { seed: 100 + trial + i as u64, max_units: 50.0, switch_prob: 0.2 }
                    .build(&b, lambda, None)
                    .x;
            }
            st.x_pre = 1.5;
            st.chi_pre = [3.0, -2.0];
            st.y0 = -40.0;
            let r = run_ledger(&b, &pl, &st, &sheet()).unwrap();
            assert!(r.max_discrepancy() < 1e-9, "trial {trial}: {}", r.max_discrepancy());
        }
    }

    #[test]
    fn liquidation_examples() {
        assert_eq!(liquidation_value(0.0, 100.0, 0.05, 1.0), 0.0);
        assert_abs_diff_eq!(liquidation_value(10.0, 100.0, 0.05, 1.0), 995.0, epsilon = 1e-10);
        // Block sale at the pre-trade quote pays the full spread on top.
        let block = block_liquidation_value(10.0, 100.0, 0.05, 0.4);
        assert_abs_diff_eq!(block, 10.0 * (100.0 - 0.4 * 0.5) - 0.6 * 0.05 * 100.0, epsilon = 1e-10);
        // Selling 10 at quote 100 with slope 0.05 receives 100*10 - 0.05*100.
        assert_abs_diff_eq!(block_liquidation_value(10.0, 100.0, 0.05, 0.0), -crate::book::execution_cost(100.0, 0.05, -10.0), epsilon = 1e-10);
    }

    #[test]
    fn admissibility_checks() {
        let zero = Array2::zeros((5, 3));
        assert!(check_admissible(&zero, 0.0).iter().all(|&a| a));
        let mut dip = Array2::zeros((5, 2));
        dip[[3, 1]] = -2.0;
        assert_eq!(check_admissible(&dip, 1.0), vec![true, false]);
    }

    #[test]
    fn buy_and_hold_is_bounded_by_initial_price() {
        let p = ModelParams { epsilon: 0.0, lambda_impact: 0.0, ..ModelParams::default() };
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 32).unwrap(), 50, 4).unwrap();
        let st = StrategyRule::Block { units: 1.0, enter: 0.0, exit: 2.0 }.build(&b, 0.0, None);
        let r = run_ledger(&b, &p, &st, &sheet()).unwrap();
        let z = r.total_gains();
        assert!(check_admissible(&z, p.s0).iter().all(|&a| a));
        for q in 0..50 {
            for k in 0..b.n_nodes() - 1 {
                assert_abs_diff_eq!(z[[k, q]], b.s[[k, q]] - p.s0, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn falling_depth_benefits_any_position() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 32).unwrap(), 200, 6).unwrap();
        let st = StrategyRule::Random { seed: 4, max_units: 5.0, switch_prob: 0.3 }.build(&b, 1.0, None);
        let r = run_ledger(&b, &p, &st, &sheet()).unwrap();
        let last = b.n_nodes() - 1;
        for q in 0..200 {
            let decreasing = (1..b.n_nodes()).all(|k| b.m[[k, q]] <= b.m[[k - 1, q]]);
            if decreasing {
                assert!(r.impact_term[[last, q]] >= 0.0);
            }
            assert!(r.quad_cost[[last, q]] <= 0.0);
        }
    }

    #[test]
    fn quadratic_cost_vanishes_under_refinement() {
        let p = ModelParams { lambda_impact: 0.3, ..ModelParams::default() };
        let mut costs = vec![];
        for n in [16usize, 64, 256] {
            let b = simulate_paths(&p, &TimeGrid::new(1.0, n).unwrap(), 100, 8).unwrap();
            let st = StrategyRule::Ramp { peak: 10.0 }.build(&b, 0.3, None);
            let r = run_ledger(&b, &p, &st, &sheet()).unwrap();
            let mean: f64 = r.quad_cost.row(n).iter().sum::<f64>() / 100.0;
            costs.push(mean.abs());
        }
        // Lipschitz profile: cost ~ 1/n, so a 4x refinement cuts it about 4x.
        for w in costs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(ratio > 3.0 && ratio < 5.0, "{costs:?}");
        }
    }

    #[test]
    fn harness_rejects_non_submartingale_params() {
        let p = ModelParams { gamma: -0.5, ..ModelParams::default() };
        let grid = TimeGrid::new(1.0, 8).unwrap();
        assert!(matches!(
            arbitrage_harness(&default_family(), &p, &grid, 10, 1, 1e3),
            Err(LabError::NotSubmartingaleParams)
        ));
    }

    #[test]
    fn zero_strategy_has_zero_mean_gain() {
        let p = ModelParams::default();
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let r = arbitrage_harness(&[StrategyRule::Zero], &p, &grid, 100, 1, 1e3).unwrap();
        assert_eq!(r.rows[0].mean, 0.0);
        assert!(!r.rows[0].violates);
    }

    #[test]
    fn frictionless_buy_and_hold_is_fair() {
        let p = ModelParams { epsilon: 0.0, lambda_impact: 0.0, ..ModelParams::default() };
        let grid = TimeGrid::new(1.0, 16).unwrap();
        let b = simulate_paths(&p, &grid, 10_000, 12).unwrap();
        let r = harness_on_bundle(&[StrategyRule::Block { units: 1.0, enter: 0.0, exit: 1.0 }], &p, &b, 1e6).unwrap();
        let row = &r.rows[0];
        assert!(row.mean.abs() < 3.0 * row.stderr, "{row:?}");
    }

    #[test]
    fn stop_out_flattens_losing_paths() {
        let p = ModelParams::default();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 32).unwrap(), 300, 2).unwrap();
        let st = StrategyRule::Block { units: 10.0, enter: 0.0, exit: 1.0 }.build(&b, 1.0, Some(20.0));
        assert!(st.is_closed());
        let no_swaps = [Array2::zeros(b.m.dim()), Array2::zeros(b.m.dim())];
        let dec = cash_decomposed(&st, &b, 1.0, &SwapLiquidity::default(), &no_swaps).unwrap();
        let z = &dec.gains + &dec.impact_term + &dec.quad_cost;
        let ok = check_admissible(&z, 200.0);
        assert!(ok.iter().all(|&a| a));
    }
}

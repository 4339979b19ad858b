//! Linear limit order book with partial price impact.
//!
//! The book around the quote has constant density `1/(2M)`, so buying `x`
//! shares walks the price from `S` to `S + 2Mx` and costs `Sx + Mx^2`. After
//! the trade a fraction `lambda` of the displacement persists in the quote.

use std::io::Write;

use ndarray::{Array2, ArrayView2};

use crate::error::{LabError, Result};
use crate::ledger::Strategy;
use crate::model::PathBundle;
use crate::report::fmt17;

/// Quote and depth of the book at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BookState {
    pub quote: f64,
    pub depth: f64,
}

impl BookState {
    /// Shares per unit of price.
    pub fn density(&self) -> Result<f64> {
        if self.depth > 0.0 {
            Ok(1.0 / (2.0 * self.depth))
        } else {
            Err(LabError::DegenerateState(format!(
                "book density undefined for depth {}",
                self.depth
            )))
        }
    }
}

/// Marginal price for a signed order of `x` shares: `S + M x`.
#[inline]
pub fn unaffected_price(s: f64, m: f64, x: f64) -> f64 {
    s + m * x
}

/// Cash paid for `x` shares (negative when selling): `S x + M x^2`.
#[inline]
pub fn execution_cost(s: f64, m: f64, x: f64) -> f64 {
    s * x + m * x * x
}

/// Quote after a trade of `dx` shares.
#[inline]
pub fn apply_impact(quote: f64, m: f64, lambda: f64, dx: f64) -> f64 {
    quote + 2.0 * lambda * m * dx
}

/// Depth seen by the impact recursion.
#[derive(Debug, Clone, Copy)]
pub enum Depth<'a> {
    Path(ArrayView2<'a, f64>),
    Constant(f64),
}

impl Depth<'_> {
    #[inline]
    fn at(&self, k: usize, p: usize) -> f64 {
        match self {
            Depth::Path(m) => m[[k, p]],
            Depth::Constant(c) => *c,
        }
    }
}

/// Pre-trade (`pre`) and post-trade (`post`) quotes, indexed `[node, path]`.
#[derive(Debug, Clone)]
pub struct ImpactedQuotePath {
    pub pre: Array2<f64>,
    pub post: Array2<f64>,
}

/// Impacted quotes for an arbitrary base price and position process.
///
/// `positions[[k, p]]` is the holding after the trade at node `k`, `pre_position`
/// the holding before node 0.
pub fn impacted_quotes(
    base: ArrayView2<'_, f64>,
    depth: Depth<'_>,
    lambda: f64,
    positions: ArrayView2<'_, f64>,
    pre_position: f64,
) -> Result<ImpactedQuotePath> {
    if base.dim() != positions.dim() {
        return Err(LabError::GridMismatch(format!(
            "prices {:?} vs positions {:?}",
            base.dim(),
            positions.dim()
        )));
    }
    if let Depth::Path(m) = depth {
        if m.dim() != base.dim() {
            return Err(LabError::GridMismatch(format!(
                "depth {:?} vs prices {:?}",
                m.dim(),
                base.dim()
            )));
        }
    }
    let (n_nodes, n_paths) = base.dim();
    let mut pre = Array2::zeros((n_nodes, n_paths));
    let mut post = Array2::zeros((n_nodes, n_paths));
    for p in 0..n_paths {
        let mut impact = 0.0;
        let mut prev_x = pre_position;
        for k in 0..n_nodes {
            let dx = positions[[k, p]] - prev_x;
            let m_now = depth.at(k, p);
            let m_prev = if k == 0 { m_now } else { depth.at(k - 1, p) };
            pre[[k, p]] = base[[k, p]] + impact;
            impact += 2.0 * lambda * (m_prev * dx + (m_now - m_prev) * dx);
            post[[k, p]] = base[[k, p]] + impact;
            prev_x = positions[[k, p]];
        }
    }
    Ok(ImpactedQuotePath { pre, post })
}

/// Impacted stock quote `S^0` under the strategy's share holdings.
pub fn impacted_quote_path(
    bundle: &PathBundle,
    strategy: &Strategy,
    lambda: f64,
) -> Result<ImpactedQuotePath> {
    strategy.check_shape(bundle)?;
    impacted_quotes(
        bundle.s.view(),
        Depth::Path(bundle.m.view()),
        lambda,
        strategy.x.view(),
        strategy.x_pre,
    )
}

/// Writes `path,step,t,S,S0_pre,S0_post,X` rows.
pub fn write_quotes_csv<W: Write>(
    mut out: W,
    bundle: &PathBundle,
    quotes: &ImpactedQuotePath,
    strategy: &Strategy,
) -> std::io::Result<()> {
    writeln!(out, "path,step,t,S,S0_pre,S0_post,X")?;
    for p in 0..bundle.n_paths() {
        for k in 0..bundle.n_nodes() {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                bundle.first_path + p,
                k,
                fmt17(bundle.grid.time(k)),
                fmt17(bundle.s[[k, p]]),
                fmt17(quotes.pre[[k, p]]),
                fmt17(quotes.post[[k, p]]),
                fmt17(strategy.x[[k, p]]),
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::TimeGrid;
    use crate::model::{simulate_paths, ModelParams, VolFn};
    use approx::assert_abs_diff_eq;
    use crate::ledger::Strategy as Holdings;
    use proptest::prelude::*;

    #[test]
    fn supply_curve_examples() {
        assert_abs_diff_eq!(unaffected_price(100.0, 0.05, 10.0), 100.5, epsilon = 1e-12);
        assert_eq!(unaffected_price(100.0, 0.05, 0.0), 100.0);
        assert_abs_diff_eq!(unaffected_price(100.0, 0.05, -10.0), 99.5, epsilon = 1e-12);
    }

    #[test]
    fn execution_cost_examples() {
        assert_abs_diff_eq!(execution_cost(100.0, 0.05, 10.0), 1005.0, epsilon = 1e-10);
        assert_abs_diff_eq!(execution_cost(100.0, 0.05, -10.0), -995.0, epsilon = 1e-10);
    }

    #[test]
    fn execution_cost_matches_book_integral() {
        // Simpson's rule on (1/2M) * z over [S, S + 2Mx]; exact for linear integrands.
        let (s, m, x) = (100.0, 0.05, 7.0);
        let (lo, hi) = (s, s + 2.0 * m * x);
        let n = 1000;
        let h = (hi - lo) / n as f64;
        let mut acc = lo + hi;
        for i in 1..n {
            let z = lo + i as f64 * h;
            acc += if i % 2 == 1 { 4.0 * z } else { 2.0 * z };
        }
        let integral = acc * h / 3.0 / (2.0 * m);
        assert_abs_diff_eq!(integral, execution_cost(s, m, x), epsilon = 1e-9);
        let book = BookState {
            quote: s,
            depth: m,
        };
        assert_abs_diff_eq!(book.density().unwrap() * 2.0 * m, 1.0, epsilon = 1e-15);
        assert!(BookState { quote: s, depth: 0.0 }.density().is_err());
    }

    #[test]
    fn impact_examples() {
        assert_abs_diff_eq!(apply_impact(100.0, 0.05, 0.5, 10.0), 100.5, epsilon = 1e-12);
        assert_eq!(apply_impact(100.0, 0.05, 0.0, 10.0), 100.0);
        assert_abs_diff_eq!(apply_impact(100.0, 0.05, 1.0, -10.0), 99.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn impact_is_additive(q in 1.0..200.0f64, m in 0.0..1.0f64, l in 0.0..=1.0f64,
                              a in -50.0..50.0f64, b in -50.0..50.0f64) {
            let two = apply_impact(apply_impact(q, m, l, a), m, l, b);
            let one = apply_impact(q, m, l, a + b);
            prop_assert!((two - one).abs() <= 1e-10 * q.abs().max(1.0));
        }
    }

    fn bundle(n_paths: usize) -> PathBundle {
        let p = ModelParams::default();
        simulate_paths(&p, &TimeGrid::new(1.0, 16).unwrap(), n_paths, 4).unwrap()
    }

    #[test]
    fn flat_strategy_leaves_quote_unaffected() {
        let b = bundle(4);
        let st = Holdings::zeros(b.n_nodes(), b.n_paths());
        let q = impacted_quote_path(&b, &st, 1.0).unwrap();
        assert_eq!(q.pre, b.s);
        assert_eq!(q.post, b.s);
    }

    #[test]
    fn zero_lambda_leaves_quote_unaffected() {
        let b = bundle(3);
        let mut st = Holdings::zeros(b.n_nodes(), b.n_paths());
        st.x.row_mut(5).fill(3.0);
        let q = impacted_quote_path(&b, &st, 0.0).unwrap();
        assert_eq!(q.pre, b.s);
        assert_eq!(q.post, b.s);
    }

    #[test]
    fn single_buy_at_constant_depth() {
        let p = ModelParams {
            phi: VolFn::Zero,
            gamma: 0.0,
            ..ModelParams::default()
        };
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 8).unwrap(), 2, 1).unwrap();
        let m = b.m[[0, 0]];
        let mut st = Holdings::zeros(b.n_nodes(), b.n_paths());
        for k in 1..b.n_nodes() {
            st.x.row_mut(k).fill(5.0);
        }
        let q = impacted_quote_path(&b, &st, 1.0).unwrap();
        for p in 0..2 {
            assert_eq!(q.post[[0, p]], b.s[[0, p]]);
            assert_eq!(q.pre[[1, p]], b.s[[1, p]]);
            for k in 1..b.n_nodes() {
                assert_abs_diff_eq!(q.post[[k, p]] - b.s[[k, p]], 2.0 * m * 5.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn closed_strategy_summation_by_parts() {
        let b = bundle(6);
        let n = b.n_nodes();
        let mut st = Holdings::zeros(n, b.n_paths());
        for k in 0..n - 1 {
            for p in 0..b.n_paths() {
                st.x[[k, p]] = ((k * 7 + p * 3) % 5) as f64 - 2.0;
            }
        }
        let lambda = 0.6;
        let q = impacted_quote_path(&b, &st, lambda).unwrap();
        for p in 0..b.n_paths() {
            let mut sum = 0.0;
            for i in 1..n {
                sum += st.x[[i - 1, p]] * (b.m[[i, p]] - b.m[[i - 1, p]]);
            }
            let impact = q.post[[n - 1, p]] - b.s[[n - 1, p]];
            assert_abs_diff_eq!(impact, -2.0 * lambda * sum, epsilon = 1e-10);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let b = bundle(3);
        let st = Holdings::zeros(b.n_nodes() - 1, 3);
        assert!(matches!(
            impacted_quote_path(&b, &st, 1.0),
            Err(LabError::GridMismatch(_))
        ));
    }
}

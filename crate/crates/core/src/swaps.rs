//! Variance swaps on `[0, T_i]` as completion instruments.
//!
//! The discounted factors `e^{-gamma t}(U + eta)` and `e^{-alpha t}(V + a)` are
//! martingales, so the swap value is affine in the current factor levels:
//!
//! ```text
//! G_t = RV_t + (U_t + eta) g(gamma, T - t) - eta (T - t)
//!            + (V_t + a)   g(alpha, T - t) - a   (T - t) - K
//! g(c, tau) = (e^{c tau} - 1) / c,   g(0, tau) = tau
//! ```
//!
//! Together with the stock they load on the three independent drivers
//! through the matrix `psi` (rows: swap 1, swap 2, stock).

use nalgebra::Matrix3;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::kernel::TimeGrid;
use crate::model::{terminal_realized_variance, ModelParams, PathBundle};
use crate::par::mean_stderr;

/// Maturity (years) and variance strike of one swap.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapSpec {
    pub maturity: f64,
    pub strike: f64,
}

/// Constant supply-curve slopes `M'_i` and impact fractions `lambda_i` of the two swaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapLiquidity {
    pub depth: [f64; 2],
    pub lambda: [f64; 2],
}

impl Default for SwapLiquidity {
    fn default() -> Self {
        Self {
            depth: [1e-3, 1e-3],
            lambda: [0.5, 0.5],
        }
    }
}

impl SwapLiquidity {
    pub fn validate(&self) -> Result<()> {
        for i in 0..2 {
            if !(self.depth[i] > 0.0) {
                return Err(LabError::InvalidParams(format!(
                    "swap depth {} must be positive",
                    i + 1
                )));
            }
            if !(0.0..=1.0).contains(&self.lambda[i]) {
                return Err(LabError::InvalidParams(format!(
                    "swap lambda {} must lie in [0,1]",
                    i + 1
                )));
            }
        }
        Ok(())
    }
}

/// The two traded swaps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapTermSheet {
    pub swaps: [SwapSpec; 2],
    pub liquidity: SwapLiquidity,
}

impl SwapTermSheet {
    /// Maturities must lie beyond the hedging horizon and differ.
    pub fn validate(&self, horizon: f64) -> Result<()> {
        let [a, b] = self.swaps;
        if !(a.maturity > horizon && b.maturity > horizon) {
            return Err(LabError::InvalidParams(format!(
                "swap maturities ({}, {}) must exceed the horizon {horizon}",
                a.maturity, b.maturity
            )));
        }
        if a.maturity == b.maturity {
            return Err(LabError::InvalidParams(
                "swap maturities must differ".into(),
            ));
        }
        self.liquidity.validate()
    }

    pub fn maturities(&self) -> [f64; 2] {
        [self.swaps[0].maturity, self.swaps[1].maturity]
    }
}

/// `(e^{c tau} - 1) / c` with its `c -> 0` limit.
pub fn growth_factor(c: f64, tau: f64) -> f64 {
    if c.abs() < 1e-10 {
        tau + 0.5 * c * tau * tau
    } else {
        (c * tau).exp_m1() / c
    }
}

/// Discounted liquidity factor `e^{-gamma t}(U + eta)`.
pub fn tilde_u(t: f64, u: f64, params: &ModelParams) -> f64 {
    (-params.gamma * t).exp() * (u + params.eta)
}

/// Discounted volatility factor `e^{-alpha t}(V + a)`.
pub fn tilde_v(t: f64, v: f64, params: &ModelParams) -> f64 {
    (-params.alpha * t).exp() * (v + params.a)
}

/// Unaffected swap value at time `t` given the factor levels and realized variance.
pub fn swap_price(t: f64, u: f64, v: f64, rv: f64, params: &ModelParams, spec: &SwapSpec) -> Result<f64> {
    if t > spec.maturity {
        return Err(LabError::MaturityPassed {
            t,
            maturity: spec.maturity,
        });
    }
    let tau = spec.maturity - t;
    Ok(rv + (u + params.eta) * growth_factor(params.gamma, tau) - params.eta * tau
        + (v + params.a) * growth_factor(params.alpha, tau)
        - params.a * tau
        - spec.strike)
}

/// Swap values along every path, `[node, path]`.
pub fn swap_price_paths(
    bundle: &PathBundle,
    params: &ModelParams,
    sheet: &SwapTermSheet,
) -> Result<[Array2<f64>; 2]> {
    let shape = (bundle.n_nodes(), bundle.n_paths());
    let mut out = [Array2::zeros(shape), Array2::zeros(shape)];
    for (i, spec) in sheet.swaps.iter().enumerate() {
        for k in 0..shape.0 {
            let t = bundle.grid.time(k);
            for p in 0..shape.1 {
                out[i][[k, p]] = swap_price(
                    t,
                    bundle.u[[k, p]],
                    bundle.v[[k, p]],
                    bundle.rv[[k, p]],
                    params,
                    spec,
                )?;
            }
        }
    }
    Ok(out)
}

/// Closed-form time-0 value against a Monte Carlo estimate of `E[RV_T - K]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SwapCheck {
    pub maturity: f64,
    pub strike: f64,
    pub closed_form: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub n_steps: usize,
}

impl SwapCheck {
    pub fn z_score(&self) -> f64 {
        (self.closed_form - self.mc_mean) / self.mc_stderr
    }
}

/// Simulates to the swap maturity with `steps_per_unit` steps per unit of time.
pub fn swap_mc_check(
    params: &ModelParams,
    spec: &SwapSpec,
    steps_per_unit: usize,
    n_paths: usize,
    seed: u64,
) -> Result<SwapCheck> {
    let n_steps = ((spec.maturity * steps_per_unit as f64).ceil() as usize).max(1);
    let grid = TimeGrid::new(spec.maturity, n_steps)?;
    let payoffs: Vec<f64> = terminal_realized_variance(params, &grid, 0, n_paths, seed)?
        .into_iter()
        .map(|rv| rv - spec.strike)
        .collect();
    let (mc_mean, mc_stderr) = mean_stderr(&payoffs);
    Ok(SwapCheck {
        maturity: spec.maturity,
        strike: spec.strike,
        closed_form: swap_price(0.0, params.u0, params.v0, 0.0, params, spec)?,
        mc_mean,
        mc_stderr,
        n_steps,
    })
}

/// Pointwise state entering `psi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeState {
    pub t: f64,
    pub s: f64,
    pub u: f64,
    pub v: f64,
}

impl NodeState {
    pub fn of(bundle: &PathBundle, k: usize, p: usize) -> Self {
        Self {
            t: bundle.grid.time(k),
            s: bundle.s[[k, p]],
            u: bundle.u[[k, p]],
            v: bundle.v[[k, p]],
        }
    }

    pub fn sigma(&self) -> f64 {
        (self.u.max(0.0) + self.v.max(0.0)).sqrt()
    }
}

/// Loadings of `(G^1, G^2, S)` on the independent drivers at one node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiMatrix {
    pub m: Matrix3<f64>,
    /// `alpha == gamma`: the two maturity rows are proportional.
    pub same_rates: bool,
    /// `Phi(U) = 0`, `Theta(V) = 0` or `Sigma S = 0`.
    pub degenerate: bool,
}

impl PsiMatrix {
    pub fn det(&self) -> f64 {
        self.m.determinant()
    }

    /// Determinant normalised by the product of row norms (1 for orthogonal rows).
    pub fn scaled_det(&self) -> f64 {
        let norms: f64 = (0..3).map(|i| self.m.row(i).norm()).product();
        if norms == 0.0 {
            0.0
        } else {
            self.det() / norms
        }
    }

    pub fn require_invertible(&self) -> Result<()> {
        if self.same_rates {
            // Rates coincide: report the rate itself.
            return Err(LabError::SingularConfig(self.m[(0, 1)]));
        }
        if self.degenerate {
            return Err(LabError::DegenerateState(
                "psi has a vanishing factor loading".into(),
            ));
        }
        Ok(())
    }
}

pub fn psi_matrix(state: &NodeState, params: &ModelParams, maturities: [f64; 2]) -> PsiMatrix {
    let phi = params.decomp.phi();
    let theta = params.decomp.theta();
    let sig = params.decomp.sigma();
    let phi_u = params.phi.eval(state.u);
    let theta_v = params.theta.eval(state.v);
    let sigma_s = state.sigma() * state.s;
    let mut m = Matrix3::zeros();
    for (i, &mat) in maturities.iter().enumerate() {
        let tau = mat - state.t;
        let gu = growth_factor(params.gamma, tau);
        let gv = growth_factor(params.alpha, tau);
        for j in 0..3 {
            m[(i, j)] = gu * phi[j] * phi_u + gv * theta[j] * theta_v;
        }
    }
    for j in 0..3 {
        m[(2, j)] = sig[j] * sigma_s;
    }
    PsiMatrix {
        m,
        same_rates: params.alpha == params.gamma,
        degenerate: phi_u == 0.0 || theta_v == 0.0 || sigma_s == 0.0,
    }
}

/// Closed-form determinant `(g_u1 g_v2 - g_u2 g_v1) phi_2 theta_3 Phi Theta sigma_1 Sigma S`.
pub fn psi_det_formula(state: &NodeState, params: &ModelParams, maturities: [f64; 2]) -> f64 {
    let tau = [maturities[0] - state.t, maturities[1] - state.t];
    let gu = tau.map(|x| growth_factor(params.gamma, x));
    let gv = tau.map(|x| growth_factor(params.alpha, x));
    (gu[0] * gv[1] - gu[1] * gv[0])
        * params.decomp.phi()[1]
        * params.decomp.theta()[2]
        * params.phi.eval(state.u)
        * params.theta.eval(state.v)
        * params.decomp.sigma()[0]
        * state.sigma()
        * state.s
}

/// Stock shares and swap units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hedge {
    pub x: f64,
    pub chi: [f64; 2],
}

/// Martingale loadings of the hedged book:
/// `Z_j = psi_{3j} X - lambda phi_j eps Gamma'(U) Phi(U) X^2 + sum_i chi_i psi_{ij}`.
pub fn hedge_to_z(hedge: &Hedge, psi: &PsiMatrix, u: f64, params: &ModelParams) -> [f64; 3] {
    let phi = params.decomp.phi();
    let quad = params.lambda_impact * params.m_loading(u) * hedge.x * hedge.x;
    std::array::from_fn(|j| {
        psi.m[(2, j)] * hedge.x - phi[j] * quad
            + hedge.chi[0] * psi.m[(0, j)]
            + hedge.chi[1] * psi.m[(1, j)]
    })
}

/// Inverts [`hedge_to_z`]: shares from the stock loading, then a 2x2 elimination for the swaps.
pub fn invert_hedge(
    z: [f64; 3],
    psi: &PsiMatrix,
    u: f64,
    params: &ModelParams,
    x_known: Option<f64>,
) -> Result<Hedge> {
    let sigma_s = psi.m[(2, 0)];
    let x = match x_known {
        Some(x) => x,
        None => {
            if sigma_s.abs() < 1e-14 {
                return Err(LabError::DegenerateState(format!(
                    "sigma_1 Sigma S = {sigma_s} too small to recover shares"
                )));
            }
            z[0] / sigma_s
        }
    };
    let phi = params.decomp.phi();
    let quad = params.lambda_impact * params.m_loading(u) * x * x;
    let r1 = z[1] - psi.m[(2, 1)] * x + phi[1] * quad;
    let r2 = z[2] - psi.m[(2, 2)] * x + phi[2] * quad;
    // [psi_01 psi_11; psi_02 psi_12] chi = r
    let (a, b, c, d) = (psi.m[(0, 1)], psi.m[(1, 1)], psi.m[(0, 2)], psi.m[(1, 2)]);
    let det = a * d - b * c;
    let scale = (a * d).abs() + (b * c).abs();
    if !(det.abs() > 1e-13 * scale) || scale == 0.0 {
        return Err(LabError::SingularSystem(det));
    }
    // Eliminate with the larger pivot in the first column.
    let chi = if a.abs() >= c.abs() {
        let f = c / a;
        let chi1 = (r2 - f * r1) / (d - f * b);
        [(r1 - b * chi1) / a, chi1]
    } else {
        let f = a / c;
        let chi1 = (r1 - f * r2) / (b - f * d);
        [(r2 - d * chi1) / c, chi1]
    };
    Ok(Hedge { x, chi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{CorrelationDecomposition, TimeGrid};
    use crate::model::{simulate_paths, VolFn};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn params() -> ModelParams {
        ModelParams {
            decomp: CorrelationDecomposition::from_correlations(-0.3, -0.5, 0.4).unwrap(),
            ..ModelParams::default()
        }
    }

    #[test]
    fn frozen_variance_price() {
        let p = ModelParams {
            gamma: 0.0,
            alpha: 0.0,
            phi: VolFn::Zero,
            theta: VolFn::Zero,
            ..ModelParams::default()
        };
        let spec = SwapSpec {
            maturity: 1.5,
            strike: 0.05,
        };
        let g = swap_price(0.0, p.u0, p.v0, 0.0, &p, &spec).unwrap();
        assert_abs_diff_eq!(g, (p.u0 + p.v0) * 1.5 - 0.05, epsilon = 1e-15);
    }

    #[test]
    fn price_matches_quadrature_of_mean_factor() {
        let p = ModelParams {
            gamma: 1.0,
            eta: 0.0,
            u0: 0.02,
            alpha: 0.0,
            a: 0.0,
            v0: 0.02,
            ..ModelParams::default()
        };
        let spec = SwapSpec {
            maturity: 1.0,
            strike: 0.05,
        };
        // E U_s = 0.02 e^s, E V_s = 0.02; composite Simpson on [0, 1].
        let n = 2000;
        let h = 1.0 / n as f64;
        let f = |s: f64| 0.02 * s.exp() + 0.02;
        let mut acc = f(0.0) + f(1.0);
        for i in 1..n {
            acc += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let oracle = acc * h / 3.0 - 0.05;
        let g = swap_price(0.0, p.u0, p.v0, 0.0, &p, &spec).unwrap();
        assert_abs_diff_eq!(g, oracle, epsilon = 1e-12);
        assert_abs_diff_eq!(g, 0.004366, epsilon = 1e-6);
    }

    #[test]
    fn expired_swap_is_an_error() {
        let spec = SwapSpec {
            maturity: 1.0,
            strike: 0.0,
        };
        assert!(matches!(
            swap_price(1.5, 0.02, 0.02, 0.0, &params(), &spec),
            Err(LabError::MaturityPassed { .. })
        ));
    }

    #[test]
    fn growth_factor_is_continuous_at_zero() {
        for tau in [0.1, 1.0, 2.5] {
            let near = growth_factor(2e-10, tau);
            let at = growth_factor(0.0, tau);
            let branch = growth_factor(5e-11, tau);
            assert_abs_diff_eq!(near, at, epsilon = 1e-9);
            assert_abs_diff_eq!(branch, at, epsilon = 1e-9);
        }
    }

    fn state() -> NodeState {
        NodeState {
            t: 0.3,
            s: 95.0,
            u: 0.03,
            v: 0.025,
        }
    }

    #[test]
    fn swaps_do_not_load_on_the_stock_only_driver() {
        let psi = psi_matrix(&state(), &params(), [1.5, 2.0]);
        assert_eq!(psi.m[(0, 0)], 0.0);
        assert_eq!(psi.m[(1, 0)], 0.0);
    }

    #[test]
    fn determinant_matches_closed_form() {
        let p = params();
        let psi = psi_matrix(&state(), &p, [1.5, 2.0]);
        let formula = psi_det_formula(&state(), &p, [1.5, 2.0]);
        assert!(psi.det().abs() > 0.0);
        assert_abs_diff_eq!(psi.det().abs(), formula.abs(), epsilon = 1e-12 * formula.abs());
        psi.require_invertible().unwrap();
    }

    #[test]
    fn equal_rates_make_psi_singular() {
        let p = ModelParams {
            alpha: 0.5,
            gamma: 0.5,
            ..params()
        };
        let psi = psi_matrix(&state(), &p, [1.5, 2.0]);
        assert!(psi.scaled_det().abs() < 1e-12);
        assert_eq!(psi_det_formula(&state(), &p, [1.5, 2.0]), 0.0);
        assert!(matches!(
            psi.require_invertible(),
            Err(LabError::SingularConfig(_))
        ));
        assert!(matches!(
            invert_hedge([1.0, 1.0, 1.0], &psi, 0.03, &p, None),
            Err(LabError::SingularSystem(_))
        ));
    }

    #[test]
    fn zero_loading_inverts_to_zero_hedge() {
        let p = params();
        let psi = psi_matrix(&state(), &p, [1.5, 2.0]);
        let h = invert_hedge([0.0; 3], &psi, 0.03, &p, None).unwrap();
        assert_eq!(h.x, 0.0);
        assert_eq!(h.chi, [0.0, 0.0]);
    }

    #[test]
    fn frictionless_map_is_linear() {
        let p = params().frictionless();
        let psi = psi_matrix(&state(), &p, [1.5, 2.0]);
        let h = Hedge {
            x: 0.7,
            chi: [-3.0, 2.0],
        };
        let z = hedge_to_z(&h, &psi, 0.03, &p);
        for j in 0..3 {
            let lin = h.chi[0] * psi.m[(0, j)] + h.chi[1] * psi.m[(1, j)] + h.x * psi.m[(2, j)];
            assert_abs_diff_eq!(z[j], lin, epsilon = 1e-14);
        }
    }

    proptest! {
        #[test]
        fn hedge_round_trip(x in -5.0..5.0f64, c1 in -50.0..50.0f64, c2 in -50.0..50.0f64,
                            t in 0.0..1.0f64, s in 20.0..200.0f64, u in 0.005..0.2f64, v in 0.005..0.2f64) {
            let p = params();
            let st = NodeState { t, s, u, v };
            let psi = psi_matrix(&st, &p, [1.5, 2.0]);
            let h = Hedge { x, chi: [c1, c2] };
            let z = hedge_to_z(&h, &psi, u, &p);
            let back = invert_hedge(z, &psi, u, &p, None).unwrap();
            prop_assert!((back.x - x).abs() < 1e-10);
            prop_assert!((back.chi[0] - c1).abs() < 1e-9);
            prop_assert!((back.chi[1] - c2).abs() < 1e-9);
        }
    }

    #[test]
    fn discounted_factors_are_flat_in_mean() {
        let p = ModelParams::default();
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let b = simulate_paths(&p, &grid, 20_000, 8).unwrap();
        let u0 = tilde_u(0.0, p.u0, &p);
        let vals: Vec<f64> = (0..b.n_paths())
            .map(|i| tilde_u(1.0, b.u[[50, i]], &p))
            .collect();
        let (m, se) = crate::par::mean_stderr(&vals);
        // Euler drift bias is O(dt); allow it on top of the statistical band.
        assert!((m - u0).abs() < 3.0 * se + 0.01 * u0, "{m} vs {u0} se {se}");
    }

    #[test]
    fn price_is_affine_in_discounted_factors() {
        let p = params();
        let spec = SwapSpec {
            maturity: 2.0,
            strike: 0.1,
        };
        let f = |u: f64, v: f64| swap_price(0.4, u, v, 0.01, &p, &spec).unwrap();
        let base = f(0.02, 0.02);
        let du = f(0.05, 0.02) - base;
        let dv = f(0.02, 0.06) - base;
        assert_abs_diff_eq!(f(0.05, 0.06) - base, du + dv, epsilon = 1e-14);
        assert_abs_diff_eq!(f(0.08, 0.02) - base, 2.0 * du, epsilon = 1e-14);
    }

    #[test]
    fn closed_form_matches_realized_variance() {
        for p in [params(), ModelParams { alpha: 0.0, ..params() }] {
            let spec = SwapSpec { maturity: 1.5, strike: 0.05 };
            let c = swap_mc_check(&p, &spec, 256, 20_000, 11).unwrap();
            assert!(c.z_score().abs() < 4.0, "{c:?}");
        }
    }

    #[test]
    fn mc_check_matches_stored_paths() {
        let p = params();
        let spec = SwapSpec { maturity: 1.0, strike: 0.0 };
        let c = swap_mc_check(&p, &spec, 8, 5000, 3).unwrap();
        let b = simulate_paths(&p, &TimeGrid::new(1.0, 8).unwrap(), 5000, 3).unwrap();
        let direct: Vec<f64> = b.rv.row(8).to_vec();
        assert_eq!(c.mc_mean.to_bits(), mean_stderr(&direct).0.to_bits());
    }
}

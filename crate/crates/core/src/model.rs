//! Exogenous market: stock `S`, liquidity factor `U`, volatility factor `V`,
//! total variance `Sigma^2 = U + V` and book depth `M = eps * Gamma(U)`.
//!
//! ```text
//! dS = Sigma S dW1
//! dU = gamma (U + eta) dt + Phi(U) dW2
//! dV = alpha (V + a) dt + Theta(V) dW3
//! ```
//!
//! `U` and `V` use a full-truncation Euler step (coefficients evaluated at the
//! positive part of the state), `S` an exact log step.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use ndarray::{s, Array2};
use rayon::prelude::*;

use crate::error::{LabError, Result};
use crate::kernel::{CorrelationDecomposition, NoiseBlock, NormalSource, TimeGrid};
use crate::report::fmt17;

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Strictly increasing C^2 map turning the liquidity factor into book depth.
#[derive(Clone)]
pub enum GammaMap {
    Identity,
    Square,
    /// User supplied value, first and second derivative.
    Custom {
        value: ScalarFn,
        d1: ScalarFn,
        d2: ScalarFn,
    },
}

impl GammaMap {
    pub fn value(&self, u: f64) -> f64 {
        match self {
            GammaMap::Identity => u,
            GammaMap::Square => u * u,
            GammaMap::Custom { value, .. } => value(u),
        }
    }

    pub fn d1(&self, u: f64) -> f64 {
        match self {
            GammaMap::Identity => 1.0,
            GammaMap::Square => 2.0 * u,
            GammaMap::Custom { d1, .. } => d1(u),
        }
    }

    pub fn d2(&self, u: f64) -> f64 {
        match self {
            GammaMap::Identity => 0.0,
            GammaMap::Square => 2.0,
            GammaMap::Custom { d2, .. } => d2(u),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GammaMap::Identity => "identity",
            GammaMap::Square => "square",
            GammaMap::Custom { .. } => "custom",
        }
    }
}

impl fmt::Debug for GammaMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Diffusion coefficient of a variance factor.
#[derive(Clone)]
pub enum VolFn {
    Zero,
    /// `coef * m^exponent` on the positive part of the state.
    Power { coef: f64, exponent: f64 },
    /// `coef * m`.
    Linear { coef: f64 },
    Custom { f: ScalarFn, lipschitz: bool },
}

impl VolFn {
    #[inline]
    pub fn eval(&self, m: f64) -> f64 {
        let m = m.max(0.0);
        match self {
            VolFn::Zero => 0.0,
            VolFn::Power { coef, exponent } => {
                if *exponent == 0.0 {
                    *coef
                } else if *exponent == 0.5 {
                    coef * m.sqrt()
                } else {
                    coef * m.powf(*exponent)
                }
            }
            VolFn::Linear { coef } => coef * m,
            VolFn::Custom { f, .. } => f(m),
        }
    }

    /// Power in `[0, 1/2]` or Lipschitz: the growth condition under which the
    /// discounted factor is a true martingale.
    pub fn satisfies_growth_condition(&self) -> bool {
        match self {
            VolFn::Zero | VolFn::Linear { .. } => true,
            VolFn::Power { exponent, .. } => (0.0..=0.5).contains(exponent),
            VolFn::Custom { lipschitz, .. } => *lipschitz,
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            VolFn::Zero => true,
            VolFn::Power { coef, .. } | VolFn::Linear { coef } => *coef == 0.0,
            VolFn::Custom { .. } => false,
        }
    }
}

impl fmt::Debug for VolFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VolFn::Zero => f.write_str("zero"),
            VolFn::Power { coef, exponent } => write!(f, "{coef}*m^{exponent}"),
            VolFn::Linear { coef } => write!(f, "{coef}*m"),
            VolFn::Custom { lipschitz, .. } => write!(f, "custom(lipschitz={lipschitz})"),
        }
    }
}

/// All model constants.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub gamma: f64,
    pub eta: f64,
    pub alpha: f64,
    pub a: f64,
    pub epsilon: f64,
    pub lambda_impact: f64,
    pub gamma_map: GammaMap,
    pub phi: VolFn,
    pub theta: VolFn,
    pub s0: f64,
    pub u0: f64,
    pub v0: f64,
    pub decomp: CorrelationDecomposition,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            eta: 0.1,
            alpha: -1.0,
            a: -0.02,
            epsilon: 0.5,
            lambda_impact: 1.0,
            gamma_map: GammaMap::Identity,
            phi: VolFn::Power {
                coef: 0.1,
                exponent: 0.5,
            },
            theta: VolFn::Power {
                coef: 0.1,
                exponent: 0.5,
            },
            s0: 100.0,
            u0: 0.02,
            v0: 0.02,
            decomp: CorrelationDecomposition::identity(),
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(LabError::InvalidParams(msg));
        if !(0.0..=1.0).contains(&self.lambda_impact) {
            return bad("lambda_impact must lie in [0,1]".into());
        }
        if !(self.epsilon >= 0.0) {
            return bad("epsilon must be non-negative".into());
        }
        for (name, v) in [("s0", self.s0), ("u0", self.u0), ("v0", self.v0)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("eta", self.eta),
            ("alpha", self.alpha),
            ("a", self.a),
        ] {
            if !v.is_finite() {
                return bad(format!("{name} must be finite"));
            }
        }
        Ok(())
    }

    /// Extra requirement when the variance swaps are used to complete the market.
    pub fn validate_for_hedging(&self) -> Result<()> {
        self.validate()?;
        if self.alpha == self.gamma {
            return Err(LabError::SingularConfig(self.alpha));
        }
        Ok(())
    }

    /// Both factor diffusions satisfy the growth condition.
    pub fn swap_conditions_hold(&self) -> bool {
        self.phi.satisfies_growth_condition() && self.theta.satisfies_growth_condition()
    }

    /// `M` is a submartingale: identity map with positive drift constants.
    pub fn submartingale_flag(&self) -> bool {
        matches!(self.gamma_map, GammaMap::Identity) && self.gamma > 0.0 && self.eta > 0.0
    }

    /// Drift of `M` as a function of the liquidity factor.
    pub fn mu(&self, u: f64) -> f64 {
        let u = u.max(0.0);
        let phi = self.phi.eval(u);
        self.epsilon * self.gamma_map.d1(u) * self.gamma * (u + self.eta)
            + 0.5 * self.epsilon * self.gamma_map.d2(u) * phi * phi
    }

    pub fn zeta(&self, u: f64) -> f64 {
        let u = u.max(0.0);
        let phi = self.phi.eval(u);
        self.epsilon * phi * phi * self.gamma_map.d1(u)
    }

    /// Diffusion of `M` on `W2`: `eps Gamma'(U) Phi(U)`.
    pub fn m_loading(&self, u: f64) -> f64 {
        let u = u.max(0.0);
        self.epsilon * self.gamma_map.d1(u) * self.phi.eval(u)
    }

    /// `mu / (sigma_1^2 Sigma^2 S^2)`.
    pub fn lambda_coeff(&self, u: f64, v: f64, s: f64) -> Result<f64> {
        let var = u.max(0.0) + v.max(0.0);
        if s < 1e-14 || var < 1e-14 {
            return Err(LabError::DegenerateState(format!(
                "Lambda needs S and Sigma^2 away from zero (S = {s}, Sigma^2 = {var})"
            )));
        }
        let s1 = self.decomp.sigma()[0];
        Ok(self.mu(u) / (s1 * s1 * var * s * s))
    }

    pub fn depth(&self, u: f64) -> f64 {
        self.epsilon * self.gamma_map.value(u.max(0.0))
    }

    /// Same model without illiquidity (`eps = 0`, `lambda = 0`).
    pub fn frictionless(&self) -> Self {
        Self {
            epsilon: 0.0,
            lambda_impact: 0.0,
            ..self.clone()
        }
    }
}

/// Drift of `M`, evaluated in the liquidity-factor variable.
pub fn mu_coeff(u: f64, params: &ModelParams) -> f64 {
    params.mu(u)
}

pub fn zeta_coeff(u: f64, params: &ModelParams) -> f64 {
    params.zeta(u)
}

pub fn lambda_coeff(u: f64, v: f64, s: f64, params: &ModelParams) -> Result<f64> {
    params.lambda_coeff(u, v, s)
}

/// Simulated paths, arrays indexed `[node, path]`.
#[derive(Debug, Clone)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub seed: u64,
    /// Index of the first path (non-zero only for batches).
    pub first_path: usize,
    pub s: Array2<f64>,
    /// Scheme state of the liquidity factor; may dip below zero under full truncation.
    pub u: Array2<f64>,
    pub v: Array2<f64>,
    pub sigma: Array2<f64>,
    pub m: Array2<f64>,
    /// Left-endpoint realized variance `sum_{j<k} Sigma_j^2 dt`.
    pub rv: Array2<f64>,
    pub noise: NoiseBlock,
}

impl PathBundle {
    pub fn n_paths(&self) -> usize {
        self.s.ncols()
    }

    pub fn n_nodes(&self) -> usize {
        self.s.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    /// Writes `path,step,t,S,U,V,Sigma,M,RV` rows.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "path,step,t,S,U,V,Sigma,M,RV")?;
        for p in 0..self.n_paths() {
            for k in 0..self.n_nodes() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{},{},{}",
                    self.first_path + p,
                    k,
                    fmt17(self.grid.time(k)),
                    fmt17(self.s[[k, p]]),
                    fmt17(self.u[[k, p]]),
                    fmt17(self.v[[k, p]]),
                    fmt17(self.sigma[[k, p]]),
                    fmt17(self.m[[k, p]]),
                    fmt17(self.rv[[k, p]]),
                )?;
            }
        }
        Ok(())
    }
}

pub fn simulate_paths(
    params: &ModelParams,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    simulate_paths_range(params, grid, 0, n_paths, seed)
}

/// Scheme state of one path between grid nodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathState {
    pub s: f64,
    pub u: f64,
    pub v: f64,
    pub rv: f64,
}

impl PathState {
    pub fn initial(params: &ModelParams) -> Self {
        Self {
            s: params.s0,
            u: params.u0,
            v: params.v0,
            rv: 0.0,
        }
    }

    /// One step driven by the independent increments `b`; returns the correlated increments.
    #[inline]
    pub fn advance(&mut self, params: &ModelParams, b: [f64; 3], dt: f64) -> [f64; 3] {
        let w = params.decomp.correlate(b);
        let (up, vp) = (self.u.max(0.0), self.v.max(0.0));
        let var = up + vp;
        self.s *= (var.sqrt() * w[0] - 0.5 * var * dt).exp();
        self.u += params.gamma * (up + params.eta) * dt + params.phi.eval(up) * w[1];
        self.v += params.alpha * (vp + params.a) * dt + params.theta.eval(vp) * w[2];
        self.rv += var * dt;
        w
    }
}

/// Paths simulated together by one task.
const SIM_BLOCK: usize = 256;

/// Simulates paths `first..first + n_paths`; each path depends only on its own index.
pub fn simulate_paths_range(
    params: &ModelParams,
    grid: &TimeGrid,
    first: usize,
    n_paths: usize,
    seed: u64,
) -> Result<PathBundle> {
    if n_paths == 0 {
        return Err(LabError::ZeroPaths);
    }
    params.validate()?;
    let n_nodes = grid.n_nodes();
    let n_steps = grid.n_steps();
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let source = NormalSource::new(seed);

    struct Block {
        nodes: [Array2<f64>; 6],
        noise: [Array2<f64>; 6],
    }

    let blocks: Vec<Block> = (0..n_paths.div_ceil(SIM_BLOCK))
        .into_par_iter()
        .map(|blk| {
            let lo = blk * SIM_BLOCK;
            let len = SIM_BLOCK.min(n_paths - lo);
            let mut nodes: [Array2<f64>; 6] = std::array::from_fn(|_| Array2::zeros((n_nodes, len)));
            let mut noise: [Array2<f64>; 6] = std::array::from_fn(|_| Array2::zeros((n_steps, len)));
            for i in 0..len {
                let mut stream = source.path_stream(first + lo + i, 0);
                let mut st = PathState::initial(params);
                let mut record = |k: usize, st: &PathState| {
                    nodes[0][[k, i]] = st.s;
                    nodes[1][[k, i]] = st.u;
                    nodes[2][[k, i]] = st.v;
                    nodes[3][[k, i]] = (st.u.max(0.0) + st.v.max(0.0)).sqrt();
                    nodes[4][[k, i]] = params.depth(st.u);
                    nodes[5][[k, i]] = st.rv;
                };
                record(0, &st);
                for k in 0..n_steps {
                    let z = stream.next_triple();
                    let b = [z[0] * sqrt_dt, z[1] * sqrt_dt, z[2] * sqrt_dt];
                    let w = st.advance(params, b, dt);
                    for j in 0..3 {
                        noise[j][[k, i]] = b[j];
                        noise[3 + j][[k, i]] = w[j];
                    }
                    record(k + 1, &st);
                }
            }
            Block { nodes, noise }
        })
        .collect();

    let mut nodes: [Array2<f64>; 6] = std::array::from_fn(|_| Array2::zeros((n_nodes, n_paths)));
    let mut noise: [Array2<f64>; 6] = std::array::from_fn(|_| Array2::zeros((n_steps, n_paths)));
    for (blk, b) in blocks.into_iter().enumerate() {
        let lo = blk * SIM_BLOCK;
        let hi = lo + b.nodes[0].ncols();
        for j in 0..6 {
            nodes[j].slice_mut(s![.., lo..hi]).assign(&b.nodes[j]);
            noise[j].slice_mut(s![.., lo..hi]).assign(&b.noise[j]);
        }
    }
    let [s, u, v, sigma, m, rv] = nodes;
    let [b0, b1, b2, w0, w1, w2] = noise;
    Ok(PathBundle {
        grid: *grid,
        seed,
        first_path: first,
        s,
        u,
        v,
        sigma,
        m,
        rv,
        noise: NoiseBlock {
            db: [b0, b1, b2],
            dw: [w0, w1, w2],
        },
    })
}

/// Terminal realized variance of paths `first..first + n_paths` without storing the paths.
///
/// Bit-identical to the last row of `rv` from [`simulate_paths_range`].
pub fn terminal_realized_variance(
    params: &ModelParams,
    grid: &TimeGrid,
    first: usize,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_paths == 0 {
        return Err(LabError::ZeroPaths);
    }
    params.validate()?;
    let dt = grid.dt();
    let sqrt_dt = dt.sqrt();
    let source = NormalSource::new(seed);
    Ok((0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut stream = source.path_stream(first + i, 0);
            let mut st = PathState::initial(params);
            for _ in 0..grid.n_steps() {
                let z = stream.next_triple();
                st.advance(params, [z[0] * sqrt_dt, z[1] * sqrt_dt, z[2] * sqrt_dt], dt);
            }
            st.rv
        })
        .collect())
}

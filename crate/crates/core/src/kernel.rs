//! Correlated Brownian increments on a uniform grid.
//!
//! The three model drivers `W` have instantaneous correlation `R`. With
//! `R^{-1} = L^T L` and `L` upper triangular, `B = L W` has independent
//! components and `W = L^{-1} B`. The rows of `L^{-1}` carry the loadings
//! of the stock, the liquidity factor and the volatility factor on `B`.

use nalgebra::Matrix3;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const PIVOT_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;
/// Keystream words reserved for one (path, step) cell.
const WORDS_PER_CELL: u128 = 8;

/// Cholesky factors of a 3x3 correlation matrix in the `R^{-1} = L^T L` convention.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationDecomposition {
    r: Matrix3<f64>,
    l: Matrix3<f64>,
    linv: Matrix3<f64>,
}

impl CorrelationDecomposition {
    pub fn identity() -> Self {
        Self {
            r: Matrix3::identity(),
            l: Matrix3::identity(),
            linv: Matrix3::identity(),
        }
    }

    /// Correlation matrix from its three off-diagonal entries.
    pub fn from_correlations(rho12: f64, rho13: f64, rho23: f64) -> Result<Self> {
        decompose_correlation(&Matrix3::new(
            1.0, rho12, rho13, //
            rho12, 1.0, rho23, //
            rho13, rho23, 1.0,
        ))
    }

    pub fn r(&self) -> &Matrix3<f64> {
        &self.r
    }

    pub fn l(&self) -> &Matrix3<f64> {
        &self.l
    }

    pub fn linv(&self) -> &Matrix3<f64> {
        &self.linv
    }

    /// Stock loadings `(sigma_1, sigma_2, sigma_3)`, first row of `L^{-1}`.
    pub fn sigma(&self) -> [f64; 3] {
        [self.linv[(0, 0)], self.linv[(0, 1)], self.linv[(0, 2)]]
    }

    /// Liquidity-factor loadings `(0, phi_2, phi_3)`.
    pub fn phi(&self) -> [f64; 3] {
        [0.0, self.linv[(1, 1)], self.linv[(1, 2)]]
    }

    /// Volatility-factor loadings `(0, 0, theta_3)`.
    pub fn theta(&self) -> [f64; 3] {
        [0.0, 0.0, self.linv[(2, 2)]]
    }

    pub fn rho12(&self) -> f64 {
        self.r[(0, 1)]
    }

    pub fn rho13(&self) -> f64 {
        self.r[(0, 2)]
    }

    pub fn rho23(&self) -> f64 {
        self.r[(1, 2)]
    }

    /// `W = L^{-1} B`.
    #[inline]
    pub fn correlate(&self, db: [f64; 3]) -> [f64; 3] {
        let m = &self.linv;
        [
            m[(0, 0)] * db[0] + m[(0, 1)] * db[1] + m[(0, 2)] * db[2],
            m[(1, 1)] * db[1] + m[(1, 2)] * db[2],
            m[(2, 2)] * db[2],
        ]
    }
}

/// Factors `R = L^{-1} L^{-T}` with `L^{-1}` upper triangular, eliminating from the
/// bottom-right corner, then inverts the triangle.
pub fn decompose_correlation(r: &Matrix3<f64>) -> Result<CorrelationDecomposition> {
    let asym = (r - r.transpose()).abs().max();
    if asym > SYMMETRY_TOL {
        return Err(LabError::NotSymmetric(asym));
    }
    for i in 0..3 {
        if (r[(i, i)] - 1.0).abs() > SYMMETRY_TOL {
            return Err(LabError::InvalidParams(format!(
                "correlation diagonal entry {i} is {} (must be 1)",
                r[(i, i)]
            )));
        }
    }

    let pivot = |index: usize, value: f64| -> Result<f64> {
        if value <= PIVOT_TOL || !value.is_finite() {
            Err(LabError::NotPositiveDefinite {
                index,
                pivot: value,
            })
        } else {
            Ok(value.sqrt())
        }
    };

    let theta3 = pivot(2, r[(2, 2)])?;
    let phi3 = r[(1, 2)] / theta3;
    let sigma3 = r[(0, 2)] / theta3;
    let phi2 = pivot(1, r[(1, 1)] - phi3 * phi3)?;
    let sigma2 = (r[(0, 1)] - sigma3 * phi3) / phi2;
    let sigma1 = pivot(0, r[(0, 0)] - sigma2 * sigma2 - sigma3 * sigma3)?;

    let linv = Matrix3::new(
        sigma1, sigma2, sigma3, //
        0.0, phi2, phi3, //
        0.0, 0.0, theta3,
    );
    // Back substitution for the inverse of an upper triangle.
    let l11 = 1.0 / sigma1;
    let l22 = 1.0 / phi2;
    let l33 = 1.0 / theta3;
    let l12 = -sigma2 * l22 / sigma1;
    let l23 = -phi3 * l33 / phi2;
    let l13 = -(sigma2 * l23 + sigma3 * l33) / sigma1;
    let l = Matrix3::new(
        l11, l12, l13, //
        0.0, l22, l23, //
        0.0, 0.0, l33,
    );

    Ok(CorrelationDecomposition { r: *r, l, linv })
}

/// Uniform time grid on `[0, horizon]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(LabError::InvalidParams(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if n_steps == 0 {
            return Err(LabError::InvalidParams("n_steps must be at least 1".into()));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        if k == self.n_steps {
            self.horizon
        } else {
            self.horizon * k as f64 / self.n_steps as f64
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }
}

/// Independent increments `dB` and correlated increments `dW = L^{-1} dB`.
///
/// Arrays are indexed `[step, path]`.
#[derive(Debug, Clone)]
pub struct NoiseBlock {
    pub db: [Array2<f64>; 3],
    pub dw: [Array2<f64>; 3],
}

impl NoiseBlock {
    pub fn n_steps(&self) -> usize {
        self.db[0].nrows()
    }

    pub fn n_paths(&self) -> usize {
        self.db[0].ncols()
    }

    #[inline]
    pub fn db_at(&self, step: usize, path: usize) -> [f64; 3] {
        [
            self.db[0][[step, path]],
            self.db[1][[step, path]],
            self.db[2][[step, path]],
        ]
    }

    #[inline]
    pub fn dw_at(&self, step: usize, path: usize) -> [f64; 3] {
        [
            self.dw[0][[step, path]],
            self.dw[1][[step, path]],
            self.dw[2][[step, path]],
        ]
    }
}

/// Counter-based standard normal triples.
///
/// Cell `(path, step)` reads words `8 step .. 8 step + 8` of ChaCha8 stream
/// `path`: four 64-bit draws feed two Box-Muller pairs and the fourth normal is
/// discarded. The fixed consumption makes sequential reading along a path
/// identical to seeking each cell.
#[derive(Debug, Clone)]
pub struct NormalSource {
    base: ChaCha8Rng,
}

const TWO_POW_M53: f64 = 1.0 / (1u64 << 53) as f64;

fn box_muller(a: u64, b: u64) -> (f64, f64) {
    // u1 in (0, 1], u2 in [0, 1)
    let u1 = ((a >> 11) + 1) as f64 * TWO_POW_M53;
    let u2 = (b >> 11) as f64 * TWO_POW_M53;
    let r = (-2.0 * u1.ln()).sqrt();
    let (sin, cos) = (std::f64::consts::TAU * u2).sin_cos();
    (r * cos, r * sin)
}

fn next_cell(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let (z0, z1) = box_muller(rng.next_u64(), rng.next_u64());
    let (z2, _) = box_muller(rng.next_u64(), rng.next_u64());
    [z0, z1, z2]
}

impl NormalSource {
    pub fn new(seed: u64) -> Self {
        Self {
            base: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Three independent N(0,1) draws, a pure function of `(seed, path, step)`.
    pub fn triple(&self, path: usize, step: usize) -> [f64; 3] {
        self.path_stream(path, step).next_triple()
    }

    /// Sequential reader of path `path` starting at `step`.
    pub fn path_stream(&self, path: usize, step: usize) -> PathStream {
        let mut rng = self.base.clone();
        rng.set_stream(path as u64);
        rng.set_word_pos(step as u128 * WORDS_PER_CELL);
        PathStream { rng }
    }
}

/// Consecutive cells of one path.
#[derive(Debug, Clone)]
pub struct PathStream {
    rng: ChaCha8Rng,
}

impl PathStream {
    #[inline]
    pub fn next_triple(&mut self) -> [f64; 3] {
        next_cell(&mut self.rng)
    }
}

/// Draws the increments for paths `0..n_paths`.
pub fn draw_noise(
    grid: &TimeGrid,
    decomp: &CorrelationDecomposition,
    n_paths: usize,
    seed: u64,
) -> Result<NoiseBlock> {
    draw_noise_range(grid, decomp, 0, n_paths, seed)
}

/// Draws increments for paths `first..first + n_paths`; path `first + i` lands in column `i`.
pub fn draw_noise_range(
    grid: &TimeGrid,
    decomp: &CorrelationDecomposition,
    first: usize,
    n_paths: usize,
    seed: u64,
) -> Result<NoiseBlock> {
    if n_paths == 0 {
        return Err(LabError::ZeroPaths);
    }
    let source = NormalSource::new(seed);
    let sqrt_dt = grid.dt().sqrt();
    let n_steps = grid.n_steps();
    let mut db: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros((n_steps, n_paths)));
    let mut dw: [Array2<f64>; 3] = std::array::from_fn(|_| Array2::zeros((n_steps, n_paths)));
    let columns: Vec<Vec<([f64; 3], [f64; 3])>> = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let mut stream = source.path_stream(first + i, 0);
            (0..n_steps)
                .map(|_| {
                    let z = stream.next_triple();
                    let b = [z[0] * sqrt_dt, z[1] * sqrt_dt, z[2] * sqrt_dt];
                    (b, decomp.correlate(b))
                })
                .collect()
        })
        .collect();
    for (i, col) in columns.into_iter().enumerate() {
        for (k, (b, w)) in col.into_iter().enumerate() {
            for j in 0..3 {
                db[j][[k, i]] = b[j];
                dw[j][[k, i]] = w[j];
            }
        }
    }
    Ok(NoiseBlock { db, dw })
}

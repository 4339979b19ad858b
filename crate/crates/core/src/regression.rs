//! Least-squares projections onto polynomial features of the market state.
//!
//! Features are standardised, expanded into monomials up to a total degree and
//! centred, so the fitted intercept is the sample mean of the target. Constant
//! inputs (every path at the same state) drop out and the projection becomes
//! the plain mean.

use nalgebra::{DMatrix, DVector};

use crate::error::{LabError, Result};
use crate::par::{accumulate, sum_by};

/// Relative ridge added to the diagonal of the normal equations.
pub const RIDGE: f64 = 1e-8;

/// Exponent tuples of all monomials in `dim` variables with total degree in `1..=degree`.
pub fn monomial_exponents(dim: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(dim: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == dim {
            if cur.iter().sum::<usize>() > 0 {
                out.push(cur.clone());
            }
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(dim, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(dim, degree, &mut Vec::new(), &mut out);
    out.sort_by_key(|e| (e.iter().sum::<usize>(), std::cmp::Reverse(e.clone())));
    out
}

/// Number of regression coefficients including the intercept.
pub fn basis_size(dim: usize, degree: usize) -> usize {
    monomial_exponents(dim, degree).len() + 1
}

/// A fitted design on a fixed sample; projects any number of targets.
#[derive(Debug, Clone)]
pub struct Projection {
    n: usize,
    p: usize,
    /// Centred features, row-major `n x p`.
    features: Vec<f64>,
    chol: Option<nalgebra::Cholesky<f64, nalgebra::Dyn>>,
    condition: f64,
}

impl Projection {
    /// Builds the design from raw inputs `rows[i] = (x_1, .., x_dim)`.
    ///
    /// `step` only labels errors.
    pub fn new(rows: &[[f64; 3]], degree: usize, step: usize) -> Result<Self> {
        let n = rows.len();
        let full = basis_size(3, degree);
        if n < full {
            return Err(LabError::RegressionRankDeficient {
                step,
                alive: n,
                basis: full,
            });
        }
        // Standardise each input; inputs without spread are dropped.
        let mut keep = Vec::new();
        let mut loc = [0.0; 3];
        let mut scale = [1.0; 3];
        for d in 0..3 {
            let mean = sum_by(n, |i| rows[i][d]) / n as f64;
            let var = sum_by(n, |i| (rows[i][d] - mean).powi(2)) / n as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * mean.abs().max(1e-300) && sd > 0.0 {
                keep.push(d);
                loc[d] = mean;
                scale[d] = sd;
            }
        }
        let exps = monomial_exponents(keep.len(), degree);
        let p = exps.len();
        let mut features = vec![0.0; n * p];
        for (i, row) in rows.iter().enumerate() {
            let z: Vec<f64> = keep.iter().map(|&d| (row[d] - loc[d]) / scale[d]).collect();
            for (j, e) in exps.iter().enumerate() {
                features[i * p + j] = e
                    .iter()
                    .zip(&z)
                    .map(|(&k, &v)| v.powi(k as i32))
                    .product();
            }
        }
        let means = accumulate(n, p, |i, acc| {
            for j in 0..p {
                acc[j] += features[i * p + j];
            }
        });
        for i in 0..n {
            for j in 0..p {
                features[i * p + j] -= means[j] / n as f64;
            }
        }
        if p == 0 {
            return Ok(Self {
                n,
                p,
                features,
                chol: None,
                condition: 1.0,
            });
        }
        let gram_flat = accumulate(n, p * p, |i, acc| {
            let f = &features[i * p..(i + 1) * p];
            for a in 0..p {
                for b in a..p {
                    acc[a * p + b] += f[a] * f[b];
                }
            }
        });
        let mut gram = DMatrix::zeros(p, p);
        for a in 0..p {
            for b in a..p {
                gram[(a, b)] = gram_flat[a * p + b];
                gram[(b, a)] = gram_flat[a * p + b];
            }
        }
        let diag_max = (0..p).map(|a| gram[(a, a)]).fold(0.0, f64::max);
        for a in 0..p {
            gram[(a, a)] += RIDGE * gram[(a, a)].max(1e-12 * diag_max);
        }
        let eig = gram.clone().symmetric_eigen().eigenvalues;
        let (lo, hi) = eig
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e)));
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        let chol = gram.cholesky().ok_or(LabError::RegressionRankDeficient {
            step,
            alive: n,
            basis: full,
        })?;
        Ok(Self {
            n,
            p,
            features,
            chol: Some(chol),
            condition,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Non-intercept features actually used.
    pub fn n_features(&self) -> usize {
        self.p
    }

    /// Eigenvalue ratio of the regularised normal matrix.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    /// Fitted values of `target` on the sample.
    pub fn project(&self, target: &[f64]) -> Vec<f64> {
        assert_eq!(target.len(), self.n, "target length must match the design");
        let (n, p) = (self.n, self.p);
        let mean = sum_by(n, |i| target[i]) / n as f64;
        let Some(chol) = &self.chol else {
            return vec![mean; n];
        };
        let rhs = accumulate(n, p, |i, acc| {
            let y = target[i] - mean;
            for j in 0..p {
                acc[j] += self.features[i * p + j] * y;
            }
        });
        let beta = chol.solve(&DVector::from_vec(rhs));
        (0..n)
            .map(|i| {
                let f = &self.features[i * p..(i + 1) * p];
                mean + f.iter().zip(beta.iter()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

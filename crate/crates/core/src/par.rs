//! Deterministic parallel helpers.
//!
//! Reductions are split into fixed-size chunks whose partial results are
//! combined in chunk order, so totals do not depend on the thread count.

use rayon::prelude::*;

/// Paths per reduction chunk.
pub const CHUNK: usize = 4096;

/// Sums `f(i)` for `i in 0..n` with a thread-count independent result.
pub fn sum_by<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            (lo..hi).map(&f).sum::<f64>()
        })
        .collect();
    partials.into_iter().sum()
}

/// Chunked reduction into a fixed-length accumulator vector.
pub fn accumulate<F>(n: usize, width: usize, f: F) -> Vec<f64>
where
    F: Fn(usize, &mut [f64]) + Sync,
{
    let partials: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let mut acc = vec![0.0; width];
            for i in lo..hi {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; width];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = sum_by(n, |i| values[i]) / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let ss = sum_by(n, |i| (values[i] - mean).powi(2));
    (mean, (ss / (n as f64 - 1.0) / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_sequential_up_to_rounding() {
        let n = 3 * CHUNK + 17;
        let seq: f64 = (0..n).map(|i| (i as f64).sqrt()).sum();
        let par = sum_by(n, |i| (i as f64).sqrt());
        assert!((seq - par).abs() <= 1e-9 * seq);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        let (m, se) = mean_stderr(&[2.0; 10]);
        assert_eq!(m, 2.0);
        assert_eq!(se, 0.0);
    }
}

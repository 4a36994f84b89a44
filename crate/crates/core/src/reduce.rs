//! Thread-count independent parallel reductions.
//!
//! Work is split into chunks of a fixed size; each chunk is summed
//! sequentially and the chunk totals are combined in index order, so the
//! floating-point result never depends on how rayon schedules the chunks.

use rayon::prelude::*;

pub const CHUNK: usize = 1024;

/// Σ_{i<n} f(i).
pub fn sum(n: usize, f: impl Fn(usize) -> f64 + Sync) -> f64 {
    let partial: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut s = 0.0;
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                s += f(i);
            }
            s
        })
        .collect();
    partial.iter().sum()
}

/// Σ_{i<n} f(i, acc) for vector-valued summands of length `len`.
pub fn sum_vec(n: usize, len: usize, f: impl Fn(usize, &mut [f64]) + Sync) -> Vec<f64> {
    let partial: Vec<Vec<f64>> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![0.0; len];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                f(i, &mut acc);
            }
            acc
        })
        .collect();
    let mut total = vec![0.0; len];
    for p in partial {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

/// Max of f(i) over i < n (NaN-propagating).
pub fn max(n: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> f64 {
    (0..n)
        .into_par_iter()
        .map(f)
        .reduce(|| f64::NEG_INFINITY, |a, b| if a.is_nan() || b.is_nan() { f64::NAN } else { a.max(b) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sums_are_independent_of_pool_size() {
        let f = |i: usize| ((i as f64) * 0.37).sin() * 1e-3 + 1.0 / (1.0 + i as f64);
        let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = pool1.install(|| sum(100_003, f));
        let b = pool4.install(|| sum(100_003, f));
        assert_eq!(a.to_bits(), b.to_bits());
        let va = pool1.install(|| sum_vec(5000, 2, |i, acc| {
            acc[0] += f(i);
            acc[1] -= f(i);
        }));
        let vb = pool4.install(|| sum_vec(5000, 2, |i, acc| {
            acc[0] += f(i);
            acc[1] -= f(i);
        }));
        assert_eq!(va, vb);
        assert_eq!(max(10, |i| i as f64), 9.0);
    }
}

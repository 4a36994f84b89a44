use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::EmpiricalMeasure;
use crate::error::{Error, Result};
use crate::rng;

/// Largest ensemble for which exact multi-dimensional transport is solved.
pub const EXACT_MAX_PARTICLES: usize = 512;

/// Directions used by the sliced approximation.
pub const SLICED_DIRECTIONS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum W2Mode {
    Exact,
    Sliced,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct W2Estimate {
    pub distance: f64,
    /// False when the value comes from the sliced approximation.
    pub exact: bool,
}

/// 2-Wasserstein distance between two empirical measures.
///
/// In one dimension the quantile coupling is exact for arbitrary weights. In
/// higher dimension `Exact` solves the assignment problem and requires equal,
/// uniformly weighted ensembles of at most [`EXACT_MAX_PARTICLES`] points.
pub fn wasserstein2(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure, mode: W2Mode) -> Result<W2Estimate> {
    if mu.dim() != nu.dim() {
        return Err(Error::ShapeMismatch(format!(
            "W2 between dimensions {} and {}",
            mu.dim(),
            nu.dim()
        )));
    }
    if mu.dim() == 1 {
        let v = quantile_w2_squared(mu.points(), mu.weights(), nu.points(), nu.weights());
        return Ok(W2Estimate {
            distance: v.sqrt(),
            exact: true,
        });
    }
    match mode {
        W2Mode::Exact => {
            let n = mu.len();
            if n != nu.len() || !mu.is_uniform() || !nu.is_uniform() || n > EXACT_MAX_PARTICLES {
                return Err(Error::ModeUnsupported {
                    n: n.max(nu.len()),
                    d: mu.dim(),
                });
            }
            Ok(W2Estimate {
                distance: assignment_w2_squared(mu.points(), nu.points(), mu.dim()).sqrt(),
                exact: true,
            })
        }
        W2Mode::Sliced => Ok(W2Estimate {
            distance: sliced_w2_squared(mu, nu).sqrt(),
            exact: false,
        }),
    }
}

/// Exact W2 for uniform ensembles; larger ones are subsampled to
/// [`EXACT_MAX_PARTICLES`] with the "subsample-w2" stream of `seed`.
/// Weighted measures in d > 1 fall back to the sliced approximation.
pub fn wasserstein2_subsampled(
    mu: &EmpiricalMeasure,
    nu: &EmpiricalMeasure,
    seed: u64,
) -> Result<W2Estimate> {
    if mu.dim() == 1 {
        return wasserstein2(mu, nu, W2Mode::Exact);
    }
    if !mu.is_uniform() || !nu.is_uniform() {
        return wasserstein2(mu, nu, W2Mode::Sliced);
    }
    // one index draw for both sides: identical inputs give exactly zero
    let a = subsample(mu, seed)?;
    let b = subsample(nu, seed)?;
    let n = a.len().min(b.len());
    let a = EmpiricalMeasure::uniform(a.points()[..n * a.dim()].to_vec(), a.dim())?;
    let b = EmpiricalMeasure::uniform(b.points()[..n * b.dim()].to_vec(), b.dim())?;
    wasserstein2(&a, &b, W2Mode::Exact)
}

fn subsample(m: &EmpiricalMeasure, seed: u64) -> Result<EmpiricalMeasure> {
    if m.len() <= EXACT_MAX_PARTICLES {
        return Ok(m.clone());
    }
    // partial Fisher-Yates on indices
    let mut rng = rng::stream(seed, rng::SUBSAMPLE_W2, 0);
    let mut idx: Vec<usize> = (0..m.len()).collect();
    for k in 0..EXACT_MAX_PARTICLES {
        let j = rng.random_range(k..idx.len());
        idx.swap(k, j);
    }
    let mut pts = Vec::with_capacity(EXACT_MAX_PARTICLES * m.dim());
    for &i in &idx[..EXACT_MAX_PARTICLES] {
        pts.extend_from_slice(m.point(i));
    }
    EmpiricalMeasure::uniform(pts, m.dim())
}

/// ∫₀¹ |F⁻¹(t) − G⁻¹(t)|² dt for two weighted samples on the line.
pub fn quantile_w2_squared(x: &[f64], wx: &[f64], y: &[f64], wy: &[f64]) -> f64 {
    let mut a: Vec<(f64, f64)> = x.iter().copied().zip(wx.iter().copied()).collect();
    let mut b: Vec<(f64, f64)> = y.iter().copied().zip(wy.iter().copied()).collect();
    a.sort_by(|p, q| p.0.total_cmp(&q.0));
    b.sort_by(|p, q| p.0.total_cmp(&q.0));
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (a[0].1, b[0].1);
    let mut acc = 0.0;
    loop {
        let step = ra.min(rb);
        let diff = a[i].0 - b[j].0;
        acc += step * diff * diff;
        ra -= step;
        rb -= step;
        // advance whichever quantile block is exhausted; ties advance both
        let adv_a = ra <= 1e-15;
        let adv_b = rb <= 1e-15;
        if adv_a {
            i += 1;
            if i == a.len() {
                break;
            }
            ra += a[i].1;
        }
        if adv_b {
            j += 1;
            if j == b.len() {
                break;
            }
            rb += b[j].1;
        }
        if !adv_a && !adv_b {
            break;
        }
    }
    acc
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean matched squared cost of the optimal assignment between equal-size
/// uniform ensembles.
pub fn assignment_w2_squared(x: &[f64], y: &[f64], dim: usize) -> f64 {
    let n = x.len() / dim;
    let cost: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let xi = &x[i * dim..(i + 1) * dim];
            (0..n).map(move |j| sq_dist(xi, &y[j * dim..(j + 1) * dim]))
        })
        .collect();
    let assignment = hungarian(&cost, n);
    assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum::<f64>()
        / n as f64
}

/// Minimum-cost perfect matching on a dense n×n cost matrix (row-major).
/// Returns `col[row]`. O(n³) shortest augmenting paths with potentials.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    // 1-based arrays; index 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            col[p[j] - 1] = j - 1;
        }
    }
    col
}

/// Fixed quasi-random unit directions (Halton points mapped to the cube
/// (-1, 1)^d, then normalized).
fn sliced_directions(dim: usize) -> Vec<Vec<f64>> {
    const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    let radical_inverse = |mut i: u64, base: u64| {
        let mut f = 1.0;
        let mut r = 0.0;
        while i > 0 {
            f /= base as f64;
            r += f * (i % base) as f64;
            i /= base;
        }
        r
    };
    let mut dirs = Vec::with_capacity(SLICED_DIRECTIONS);
    let mut i = 1u64;
    while dirs.len() < SLICED_DIRECTIONS {
        let v: Vec<f64> = (0..dim)
            .map(|k| 2.0 * radical_inverse(i, PRIMES[k % PRIMES.len()] + 2 * (k / PRIMES.len()) as u64) - 1.0)
            .collect();
        i += 1;
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            dirs.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    dirs
}

/// d × mean over directions of the squared 1-d W2 of the projections; the
/// factor d makes the estimate consistent for translations.
fn sliced_w2_squared(mu: &EmpiricalMeasure, nu: &EmpiricalMeasure) -> f64 {
    let d = mu.dim();
    let dirs = sliced_directions(d);
    let project = |m: &EmpiricalMeasure, dir: &[f64]| -> Vec<f64> {
        m.points()
            .chunks_exact(d)
            .map(|x| x.iter().zip(dir).map(|(a, b)| a * b).sum())
            .collect()
    };
    let total: f64 = dirs
        .iter()
        .map(|dir| {
            quantile_w2_squared(&project(mu, dir), mu.weights(), &project(nu, dir), nu.weights())
        })
        .sum();
    d as f64 * total / dirs.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CouplingBound {
    pub w2sq: f64,
    pub mse: f64,
    pub ok: bool,
}

/// Compares W2(L(X), L(X'))² with E|X − X'|² for index-paired samples.
pub fn coupling_bound_check(x: &[f64], x_prime: &[f64], dim: usize) -> Result<CouplingBound> {
    if x.len() != x_prime.len() || x.is_empty() || x.len() % dim != 0 {
        return Err(Error::ShapeMismatch(format!(
            "paired samples of lengths {} and {}",
            x.len(),
            x_prime.len()
        )));
    }
    let n = x.len() / dim;
    let mse = x
        .chunks_exact(dim)
        .zip(x_prime.chunks_exact(dim))
        .map(|(a, b)| sq_dist(a, b))
        .sum::<f64>()
        / n as f64;
    let w2sq = if dim == 1 {
        let w = vec![1.0 / n as f64; n];
        quantile_w2_squared(x, &w, x_prime, &w)
    } else if n <= EXACT_MAX_PARTICLES {
        assignment_w2_squared(x, x_prime, dim)
    } else {
        return Err(Error::ModeUnsupported { n, d: dim });
    };
    Ok(CouplingBound {
        w2sq,
        mse,
        ok: w2sq <= mse + 1e-9,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_assignment(cost: &[f64], n: usize) -> f64 {
        fn rec(cost: &[f64], n: usize, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == n {
                *best = best.min(acc);
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    rec(cost, n, row + 1, used, acc + cost[row * n + j], best);
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, n, 0, &mut vec![false; n], 0.0, &mut best);
        best
    }

    #[test]
    fn identical_measures_are_at_distance_zero() {
        let m = EmpiricalMeasure::uniform(vec![0.1, 0.4, -2.0, 3.0], 2).unwrap();
        assert_eq!(wasserstein2(&m, &m, W2Mode::Exact).unwrap().distance, 0.0);
    }

    #[test]
    fn diracs_are_at_euclidean_distance() {
        let a = EmpiricalMeasure::dirac(&[1.0, 2.0]);
        let b = EmpiricalMeasure::dirac(&[4.0, 6.0]);
        let w = wasserstein2(&a, &b, W2Mode::Exact).unwrap();
        assert!((w.distance - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_point_example_picks_cheaper_pairing() {
        // pairings cost (0 + 1)/2 = 0.5 or (4 + 1)/2 = 2.5
        let mu = EmpiricalMeasure::uniform(vec![0.0, 1.0], 1).unwrap();
        let nu = EmpiricalMeasure::uniform(vec![0.0, 2.0], 1).unwrap();
        let w = wasserstein2(&mu, &nu, W2Mode::Exact).unwrap();
        assert!((w.distance - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn weighted_quantile_handles_unequal_supports() {
        // μ = δ0, ν = ½δ0 + ½δ2 → W2² = ½·4
        let mu = EmpiricalMeasure::dirac(&[0.0]);
        let nu = EmpiricalMeasure::uniform(vec![0.0, 2.0], 1).unwrap();
        let w = wasserstein2(&mu, &nu, W2Mode::Exact).unwrap();
        assert!((w.distance - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn hungarian_matches_brute_force() {
        use rand::Rng;
        let mut rng = rng::stream(3, "test", 0);
        for n in 1..=7 {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            let col = hungarian(&cost, n);
            let got: f64 = col.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            assert!((got - brute_force_assignment(&cost, n)).abs() < 1e-12);
        }
    }

    #[test]
    fn exact_mode_limits_size() {
        let pts: Vec<f64> = (0..2 * 600).map(|i| i as f64).collect();
        let m = EmpiricalMeasure::uniform(pts, 2).unwrap();
        assert!(matches!(
            wasserstein2(&m, &m, W2Mode::Exact),
            Err(Error::ModeUnsupported { n: 600, d: 2 })
        ));
        let s = wasserstein2(&m, &m, W2Mode::Sliced).unwrap();
        assert!(!s.exact);
        assert_eq!(s.distance, 0.0);
    }

    #[test]
    fn sliced_recovers_translations() {
        let pts: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let shifted: Vec<f64> = pts
            .chunks(2)
            .flat_map(|p| [p[0] + 0.3, p[1] - 0.4])
            .collect();
        let a = EmpiricalMeasure::uniform(pts, 2).unwrap();
        let b = EmpiricalMeasure::uniform(shifted, 2).unwrap();
        let exact = wasserstein2(&a, &b, W2Mode::Exact).unwrap().distance;
        let sliced = wasserstein2(&a, &b, W2Mode::Sliced).unwrap().distance;
        assert!((exact - 0.5).abs() < 1e-12);
        assert!((sliced - exact).abs() < 0.1);
    }

    #[test]
    fn coupling_bound_examples() {
        let x = vec![0.0, 1.0, 3.0, -2.0];
        let same = coupling_bound_check(&x, &x, 1).unwrap();
        assert_eq!((same.w2sq, same.mse, same.ok), (0.0, 0.0, true));

        let shifted: Vec<f64> = x.iter().map(|v| v + 0.5).collect();
        let c = coupling_bound_check(&x, &shifted, 1).unwrap();
        assert!((c.w2sq - 0.25).abs() < 1e-12 && (c.mse - 0.25).abs() < 1e-12 && c.ok);

        let permuted = vec![3.0, -2.0, 0.0, 1.0];
        let p = coupling_bound_check(&x, &permuted, 1).unwrap();
        assert!(p.w2sq < p.mse && p.ok);
    }
}

use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{Continuous, Normal};

use crate::error::{Error, Result};
use crate::forward::PathEnsemble;

#[derive(Clone)]
pub struct DensityOptions<'a> {
    pub coordinate: usize,
    /// `None` selects Silverman's rule.
    pub bandwidth: Option<f64>,
    pub grid_points: usize,
    /// Closed-form marginal density to compare against, if known.
    pub reference: Option<&'a (dyn Fn(f64) -> f64 + Sync)>,
}

impl Default for DensityOptions<'_> {
    fn default() -> Self {
        Self {
            coordinate: 0,
            bandwidth: None,
            grid_points: 201,
            reference: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DensityReport {
    pub node: usize,
    pub t: f64,
    pub coordinate: usize,
    pub bandwidth: f64,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    /// 5% and 95% sample quantiles.
    pub bulk: (f64, f64),
    pub min_bulk_density: f64,
    /// max |f(x+δ) − 2f(x) + f(x−δ)|/δ² on the grid.
    pub max_second_difference: f64,
    /// Fraction of particles with |X_n − X_0| ≤ 3√(t_n − t_0).
    pub near_start_fraction: f64,
    pub sup_error_vs_reference: Option<f64>,
}

/// 0.9·min(sd, IQR/1.34)·n^{-1/5}.
pub fn silverman_bandwidth(sorted: &[f64]) -> f64 {
    let n = sorted.len() as f64;
    let mean = sorted.iter().sum::<f64>() / n;
    let sd = (sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let iqr = quantile(sorted, 0.75) - quantile(sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Gaussian-kernel estimate of one marginal of the law at `node` (> 0).
/// Positivity and bounded second differences are evidence of a smooth
/// density, not a proof of it.
pub fn density_diagnostic(paths: &PathEnsemble, node: usize, opts: &DensityOptions<'_>) -> Result<DensityReport> {
    let d = paths.dim();
    if node == 0 || node > paths.steps() {
        return Err(Error::invalid(format!("density node must lie in 1..={}", paths.steps())));
    }
    if opts.coordinate >= d {
        return Err(Error::invalid(format!("coordinate {} out of range", opts.coordinate)));
    }
    if opts.grid_points < 3 {
        return Err(Error::invalid("need at least 3 grid points"));
    }
    let c = opts.coordinate;
    let p = paths.particles();
    let mut xs: Vec<f64> = (0..p).map(|i| paths.state(i, node)[c]).collect();
    xs.sort_by(f64::total_cmp);
    let h = opts.bandwidth.unwrap_or_else(|| silverman_bandwidth(&xs));
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::BandwidthInvalid(h));
    }

    let (lo, hi) = (xs[0] - 3.0 * h, xs[p - 1] + 3.0 * h);
    let step = (hi - lo) / (opts.grid_points - 1) as f64;
    let grid: Vec<f64> = (0..opts.grid_points).map(|k| lo + k as f64 * step).collect();
    let kernel = Normal::new(0.0, 1.0).expect("standard normal");
    let density: Vec<f64> = grid
        .par_iter()
        .map(|&g| {
            // only particles within 8h contribute measurably
            let a = xs.partition_point(|&x| x < g - 8.0 * h);
            let b = xs.partition_point(|&x| x <= g + 8.0 * h);
            xs[a..b].iter().map(|&x| kernel.pdf((g - x) / h)).sum::<f64>() / (p as f64 * h)
        })
        .collect();

    let bulk = (quantile(&xs, 0.05), quantile(&xs, 0.95));
    let min_bulk_density = grid
        .iter()
        .zip(&density)
        .filter(|(g, _)| **g >= bulk.0 && **g <= bulk.1)
        .map(|(_, f)| *f)
        .fold(f64::INFINITY, f64::min);
    let max_second_difference = density
        .windows(3)
        .map(|w| ((w[2] - 2.0 * w[1] + w[0]) / (step * step)).abs())
        .fold(0.0, f64::max);
    let elapsed = paths.grid().time(node) - paths.grid().t0();
    let radius = 3.0 * elapsed.sqrt();
    let near = (0..p).filter(|&i| (paths.state(i, node)[c] - paths.state(i, 0)[c]).abs() <= radius).count();
    let sup_error_vs_reference = opts
        .reference
        .map(|f| grid.iter().zip(&density).map(|(g, v)| (v - f(*g)).abs()).fold(0.0, f64::max));

    Ok(DensityReport {
        node,
        t: paths.grid().time(node),
        coordinate: c,
        bandwidth: h,
        grid,
        density,
        bulk,
        min_bulk_density,
        max_second_difference,
        near_start_fraction: near as f64 / p as f64,
        sup_error_vs_reference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silverman_of_a_uniform_grid() {
        let xs: Vec<f64> = (0..1001).map(|k| k as f64 / 1000.0).collect();
        let h = silverman_bandwidth(&xs);
        // sd = 0.2888, IQR/1.34 = 0.373
        assert!((h - 0.9 * 0.28896 * 1001f64.powf(-0.2)).abs() < 1e-4);
    }

    #[test]
    fn quantiles_interpolate() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(quantile(&xs, 0.5), 1.5);
        assert_eq!(quantile(&xs, 1.0), 3.0);
    }
}

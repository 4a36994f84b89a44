//! Particle finite-difference proxies for the Lions derivative ∂_μ f(μ, v).
//!
//! For a uniform N-particle measure, moving particle i by h·e_k changes f by
//! about (h/N)·∂_μ f(μ, x_i)_k, so the central difference scaled by N recovers
//! the derivative at the support point x_i. Accuracy is O(h²) + O(1/N).

use serde::Serialize;

use super::{wasserstein2, EmpiricalMeasure, W2Mode};
use crate::error::{check_finite, Error, Result};

/// Default step N^{-1/2}·0.1·spread(μ), with a floor for degenerate measures.
pub fn default_lions_step(mu: &EmpiricalMeasure) -> f64 {
    let spread = mu.spread();
    let scale = if spread > 1e-12 { spread } else { 1.0 };
    0.1 * scale / (mu.len() as f64).sqrt()
}

/// ∂_μ f(μ, x_i) by central differences in the position of particle `i`.
pub fn lions_derivative<F>(f: F, mu: &EmpiricalMeasure, i: usize, h: f64) -> Result<Vec<f64>>
where
    F: Fn(&EmpiricalMeasure) -> f64,
{
    if !mu.is_uniform() {
        return Err(Error::invalid("Lions proxy requires uniform weights"));
    }
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("Lions step must be positive, got {h}")));
    }
    if i >= mu.len() {
        return Err(Error::invalid(format!(
            "particle {i} out of range for {} particles",
            mu.len()
        )));
    }
    let d = mu.dim();
    let n = mu.len() as f64;
    let mut delta = vec![0.0; d];
    let mut grad = vec![0.0; d];
    for k in 0..d {
        delta[k] = h;
        let up = f(&mu.shifted(i, &delta));
        delta[k] = -h;
        let down = f(&mu.shifted(i, &delta));
        delta[k] = 0.0;
        let g = n * (up - down) / (2.0 * h);
        grad[k] = check_finite(g, || format!("Lions derivative at particle {i}, component {k}"))?;
    }
    Ok(grad)
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzReport {
    /// Smallest C with |∂f(μ,v) − ∂f(μ',v')| ≤ C (W2(μ,μ') + |v − v'|) on all probed pairs.
    pub fitted_constant: f64,
    pub pairs_checked: usize,
    /// Set when a declared bound exists and the fit exceeds ten times it.
    pub blow_up: bool,
    pub label: &'static str,
}

/// Fits the Lipschitz constant of the Lions derivative over a family of
/// equal-size uniform measures. Support points are paired by index, both
/// across measures and between neighbouring particles of one measure.
pub fn lipschitz_probe_dmu<F>(
    f: F,
    measures: &[EmpiricalMeasure],
    h: f64,
    declared_bound: Option<f64>,
    max_particles: usize,
) -> Result<LipschitzReport>
where
    F: Fn(&EmpiricalMeasure) -> f64,
{
    if measures.len() < 2 {
        return Err(Error::invalid("Lipschitz probe needs at least two measures"));
    }
    let probe = |mu: &EmpiricalMeasure| -> Result<Vec<Vec<f64>>> {
        let count = mu.len().min(max_particles.max(1));
        (0..count).map(|i| lions_derivative(&f, mu, i, h)).collect()
    };
    let grads: Vec<Vec<Vec<f64>>> = measures.iter().map(probe).collect::<Result<_>>()?;
    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    };
    let mut fitted: f64 = 0.0;
    let mut pairs = 0usize;
    let mut consider = |num: f64, den: f64| {
        pairs += 1;
        if den > 1e-12 {
            fitted = fitted.max(num / den);
        }
    };
    for (a, mu) in measures.iter().enumerate() {
        for i in 1..grads[a].len() {
            consider(
                dist(&grads[a][i], &grads[a][i - 1]),
                dist(mu.point(i), mu.point(i - 1)),
            );
        }
        for (b, nu) in measures.iter().enumerate().skip(a + 1) {
            let w2 = wasserstein2(mu, nu, W2Mode::Exact)
                .or_else(|_| wasserstein2(mu, nu, W2Mode::Sliced))?
                .distance;
            for i in 0..grads[a].len().min(grads[b].len()) {
                consider(
                    dist(&grads[a][i], &grads[b][i]),
                    w2 + dist(mu.point(i), nu.point(i)),
                );
            }
        }
    }
    Ok(LipschitzReport {
        fitted_constant: fitted,
        pairs_checked: pairs,
        blow_up: declared_bound.is_some_and(|c| fitted > 10.0 * c),
        label: "proxy order O(h^2)+O(1/N)",
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_functional(phi: fn(f64) -> f64) -> impl Fn(&EmpiricalMeasure) -> f64 {
        move |m: &EmpiricalMeasure| m.iter().map(|(x, w)| w * phi(x[0])).sum()
    }

    fn grid_measure(n: usize, offset: f64) -> EmpiricalMeasure {
        let pts = (0..n).map(|i| offset + i as f64 / n as f64).collect();
        EmpiricalMeasure::uniform(pts, 1).unwrap()
    }

    #[test]
    fn linear_functional_recovers_gradient() {
        let mu = grid_measure(50, -0.5);
        let f = linear_functional(|x| x * x);
        for i in [0, 17, 49] {
            let g = lions_derivative(&f, &mu, i, 1e-3).unwrap();
            assert!((g[0] - 2.0 * mu.point(i)[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_functional_has_zero_derivative() {
        let mu = grid_measure(10, 0.0);
        let g = lions_derivative(|_: &EmpiricalMeasure| 3.0, &mu, 4, 0.01).unwrap();
        assert_eq!(g, vec![0.0]);
    }

    #[test]
    fn squared_mean_gives_twice_the_mean() {
        let mu = grid_measure(40, 0.3);
        let f = |m: &EmpiricalMeasure| m.mean()[0].powi(2);
        let g = lions_derivative(f, &mu, 5, 1e-4).unwrap();
        // exact shift of one particle: N·[(m+h/N)² − (m−h/N)²]/(2h) = 2m
        assert!((g[0] - 2.0 * mu.mean()[0]).abs() < 1e-8);
    }

    #[test]
    fn central_differences_are_second_order() {
        let mu = grid_measure(20, 0.1);
        let f = linear_functional(f64::sin);
        let exact = mu.point(3)[0].cos();
        let e1 = (lions_derivative(&f, &mu, 3, 0.2).unwrap()[0] - exact).abs();
        let e2 = (lions_derivative(&f, &mu, 3, 0.1).unwrap()[0] - exact).abs();
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn lipschitz_probe_examples() {
        let ms = vec![grid_measure(8, 0.0), grid_measure(8, 1.0)];
        let lin = linear_functional(|x| x);
        let r = lipschitz_probe_dmu(&lin, &ms, 1e-3, Some(1.0), 8).unwrap();
        assert!(r.fitted_constant < 1e-6 && !r.blow_up);

        let r = lipschitz_probe_dmu(|_: &EmpiricalMeasure| 1.0, &ms, 1e-3, None, 8).unwrap();
        assert_eq!(r.fitted_constant, 0.0);

        let sq = |m: &EmpiricalMeasure| m.mean()[0].powi(2);
        let r = lipschitz_probe_dmu(sq, &ms, 1e-4, None, 8).unwrap();
        // |2·m − 2·m'| / (W2 + |v − v'|) with m' − m = W2 = |v − v'| = 1
        assert!(r.fitted_constant.is_finite() && r.fitted_constant > 0.5 && r.fitted_constant < 2.0);
    }

    #[test]
    fn rejects_weighted_measures() {
        let mu = EmpiricalMeasure::weighted(vec![0.0, 1.0], vec![1.0, 2.0], 1).unwrap();
        assert!(lions_derivative(|_: &EmpiricalMeasure| 0.0, &mu, 0, 0.1).is_err());
    }
}

use std::sync::Arc;

use weakmfg::bsde::*;
use weakmfg::forward::{simulate_forward, ConstantFields, Drift, InitialLaw, PathEnsemble, TimeGrid};
use weakmfg::model::{ConstantWeight, ModelDriver, QuadraticCostModel, ZeroDriver};
use weakmfg::registry::Params;
use weakmfg::terminal::{LinearTerminal, SquareTerminal};

fn brownian(particles: usize, steps: usize, seed: u64) -> PathEnsemble {
    let vfs = ConstantFields::scaled_identity(1, 1.0);
    let init = InitialLaw::Gaussian {
        mean: vec![0.0],
        std: 1.0,
    };
    simulate_forward(&vfs, &Drift::Zero, &init, TimeGrid::new(0.0, 1.0, steps).unwrap(), particles, seed).unwrap()
}

fn worst_heat_error(paths: &PathEnsemble, sol: &BsdeSolution) -> f64 {
    (1..paths.steps())
        .map(|n| {
            let tau = 1.0 - paths.grid().time(n);
            let (mut e2, mut r2) = (0.0, 0.0);
            for i in 0..paths.particles() {
                let exact = paths.state(i, n)[0].powi(2) + tau;
                e2 += (sol.y(i, n) - exact).powi(2);
                r2 += exact * exact;
            }
            (e2 / r2).sqrt()
        })
        .fold(0.0, f64::max)
}

#[test]
fn heat_solution_without_the_terminal_control_variate() {
    let paths = brownian(5000, 20, 1);
    let g = SquareTerminal { dim: 1, scale: 1.0 };
    let sol = solve_backward(&paths, &ZeroDriver::new(1, 1), &paths.law_flow(), &g, &PolynomialBasis::new(2)).unwrap();
    let err = worst_heat_error(&paths, &sol);
    assert!(err < 0.03, "{err}");
}

#[test]
fn quadratic_driver_matches_the_cole_hopf_value() {
    // L = |a|², g = x: α̂ = z/2, F = z²/4 with Z ≡ 1, so Y_t = X_t + (T − t)/4
    let paths = brownian(4000, 20, 2);
    let model = Arc::new(QuadraticCostModel::new(1, Box::new(ConstantWeight::new(1.0).unwrap()), 0.0).unwrap());
    let g = LinearTerminal {
        coefficients: vec![1.0],
    };
    let vfs = ConstantFields::scaled_identity(1, 1.0);
    let opts = BsdeOptions {
        diffusion: Some(&vfs),
        ..Default::default()
    };
    let sol = solve_backward_with(&paths, &ModelDriver::new(model), &paths.law_flow(), &g, &PolynomialBasis::new(2), &opts)
        .unwrap();
    for n in [0, 10, 19] {
        let tau = 1.0 - paths.grid().time(n);
        for i in (0..4000).step_by(97) {
            let exact = paths.state(i, n)[0] + tau / 4.0;
            assert!((sol.y(i, n) - exact).abs() < 1e-3, "n={n}: {} vs {exact}", sol.y(i, n));
            assert!((sol.z(i, n)[0] - 1.0).abs() < 5e-3, "n={n} i={i} z={}", sol.z(i, n)[0]);
            assert!((sol.control(i, n)[0] - 0.5).abs() < 2.5e-3);
        }
    }
}

#[test]
fn truncation_caps_z() {
    let paths = brownian(1000, 10, 3);
    let g = SquareTerminal { dim: 1, scale: 5.0 };
    let opts = BsdeOptions {
        truncation: Truncation::Radius(1.0),
        ..Default::default()
    };
    let sol = solve_backward_with(&paths, &ZeroDriver::new(1, 1), &paths.law_flow(), &g, &PolynomialBasis::new(2), &opts)
        .unwrap();
    for n in 0..10 {
        let cap = (1.0 + (10 - n) as f64).ln().sqrt();
        assert!(sol.z_node(n).iter().all(|z| z.abs() <= cap + 1e-12), "node {n}");
    }
}

#[test]
fn picard_residual_is_zero_between_identical_solves() {
    let paths = brownian(500, 5, 4);
    let g = SquareTerminal { dim: 1, scale: 1.0 };
    let a = solve_backward(&paths, &ZeroDriver::new(1, 1), &paths.law_flow(), &g, &PolynomialBasis::new(2)).unwrap();
    let b = solve_backward(&paths, &ZeroDriver::new(1, 1), &paths.law_flow(), &g, &PolynomialBasis::new(2)).unwrap();
    assert_eq!(picard_residual(&a, &b).unwrap(), 0.0);
    let bmo = bmo_estimate(&a, &paths, &PolynomialBasis::new(2)).unwrap();
    // E[∫_t^T |Z|² | F_t] ≈ 4∫_t^T (X_t² + s − t) ds ≤ 4(x² + ½) on the bulk
    assert!(bmo.is_finite() && bmo > 0.0);
}

#[test]
fn kernel_basis_solves_the_heat_equation() {
    let paths = brownian(5000, 10, 5);
    let g = SquareTerminal { dim: 1, scale: 1.0 };
    let basis = basis_registry().build("local-kernel", &Params::new()).unwrap();
    let sol = solve_backward(&paths, &ZeroDriver::new(1, 1), &paths.law_flow(), &g, basis.as_ref()).unwrap();
    let err = worst_heat_error(&paths, &sol);
    assert!(err < 0.05, "{err}");
    assert!(basis_registry().build("local-kernel", &Params::new().with("bandwidth", 0.0)).is_err());
}

#[test]
fn polynomial_fit_reproduces_a_quadratic() {
    let x: Vec<f64> = (0..200).flat_map(|k| [(k as f64 * 0.618).fract() * 4.0 - 2.0, (k as f64 * 0.754).fract() * 2.0 - 1.0]).collect();
    let y: Vec<f64> = x.chunks(2).map(|p| 1.0 + p[0] - 2.0 * p[1] + p[0] * p[1] + 0.5 * p[1] * p[1]).collect();
    let f = fit(&PolynomialBasis::new(2), &x, 2, &y, 1, 0).unwrap();
    assert!(f.residuals[0] < 1e-6);
    let g = f.gradient(&[0.5, 0.5], 0);
    assert!((g[0] - 1.5).abs() < 1e-5 && (g[1] - (-2.0 + 0.5 + 0.5)).abs() < 1e-5, "{g:?}");
    let h = f.hessian(&[0.0, 0.0], 0);
    assert!((h[1] - 1.0).abs() < 1e-5 && (h[3] - 1.0).abs() < 1e-5, "{h:?}");
}

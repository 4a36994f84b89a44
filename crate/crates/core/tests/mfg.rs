use std::sync::Arc;

use weakmfg::forward::{simulate_forward, ConstantFields, Drift, InitialLaw, TimeGrid};
use weakmfg::mfg::*;
use weakmfg::model::{ConstantWeight, LagrangianModel, QuadraticCostModel};
use weakmfg::terminal::{MeanCoupledTerminal, SquareTerminal};
use weakmfg::Error;

fn quadratic() -> Arc<dyn LagrangianModel> {
    Arc::new(QuadraticCostModel::new(1, Box::new(ConstantWeight::new(1.0).unwrap()), 0.0).unwrap())
}

fn setup() -> (ConstantFields, InitialLaw, TimeGrid) {
    let init = InitialLaw::Gaussian {
        mean: vec![1.0],
        std: 0.5,
    };
    (ConstantFields::scaled_identity(1, 1.0), init, TimeGrid::new(0.0, 1.0, 20).unwrap())
}

#[test]
fn measure_independent_game_converges_immediately() {
    let (vfs, init, grid) = setup();
    let config = EquilibriumConfig {
        particles: 2000,
        ..Default::default()
    };
    let g = SquareTerminal { dim: 1, scale: 0.5 };
    let r = solve_equilibrium(quadratic(), &g, &vfs, &Drift::Zero, &init, grid, &config).unwrap();
    assert!(r.converged);
    assert!(r.iterations <= 2, "{}", r.iterations);
    // α̂ = z/2 ≈ X/2 tilts the law outward: the mean grows roughly like e^{t/2}
    let mean = r.flow.at(20).mean()[0];
    assert!(mean > 1.3 && mean < 2.2, "terminal mean {mean}");
}

#[test]
fn exhausted_iterations_report_the_history() {
    let (vfs, init, grid) = setup();
    let config = EquilibriumConfig {
        particles: 2000,
        max_iter: 1,
        tol: 1e-12,
        ..Default::default()
    };
    let g = MeanCoupledTerminal { dim: 1, scale: 1.0 };
    match solve_equilibrium(quadratic(), &g, &vfs, &Drift::Zero, &init, grid, &config) {
        Err(Error::NoConvergence { residual_history, .. }) => assert_eq!(residual_history.len(), 1),
        other => panic!("expected non-convergence, got {:?}", other.map(|r| r.iterations)),
    }
    let paths = simulate_forward(&vfs, &Drift::Zero, &init, grid, 2000, 0).unwrap();
    let r = run_picard(paths, quadratic(), &g, Some(&vfs), &config).unwrap();
    assert!(!r.converged);
}

#[test]
fn invalid_damping_is_rejected() {
    let (vfs, init, grid) = setup();
    let config = EquilibriumConfig {
        particles: 100,
        damping: 1.5,
        ..Default::default()
    };
    let g = MeanCoupledTerminal { dim: 1, scale: 1.0 };
    let r = solve_equilibrium(quadratic(), &g, &vfs, &Drift::Zero, &init, grid, &config);
    assert!(matches!(r, Err(Error::InvalidParameter(_))));
}

#[test]
fn untilted_mode_keeps_the_uniform_law() {
    let (vfs, init, grid) = setup();
    let config = EquilibriumConfig {
        particles: 2000,
        measure_mode: MeasureMode::Untilted,
        ..Default::default()
    };
    let g = MeanCoupledTerminal { dim: 1, scale: 1.0 };
    let r = solve_equilibrium(quadratic(), &g, &vfs, &Drift::Zero, &init, grid, &config).unwrap();
    assert!(r.converged);
    let w = r.flow.at(20).weights();
    assert!(w.iter().all(|v| (v - w[0]).abs() < 1e-15));
    assert!(r.monotonicity.holds());
}

#[test]
fn zero_control_gives_unit_weights() {
    let (vfs, init, grid) = setup();
    let paths = simulate_forward(&vfs, &Drift::Zero, &init, grid, 300, 1).unwrap();
    let w = girsanov_weights(&paths, &rule_controls(&paths, &ConstantControl(vec![0.0]))).unwrap();
    for n in 0..=20 {
        assert!(w.node_weights(n).iter().all(|v| *v == 1.0));
    }
    assert_eq!(w.martingale_deviation(), 0.0);
    assert_eq!(w.effective_sample_size(20), 300.0);
}

#[test]
fn weights_follow_the_stochastic_exponential() {
    let (vfs, init, grid) = setup();
    let paths = simulate_forward(&vfs, &Drift::Zero, &init, grid, 50, 2).unwrap();
    let c = 0.7;
    let w = girsanov_weights(&paths, &rule_controls(&paths, &ConstantControl(vec![c]))).unwrap();
    for i in 0..50 {
        let wt: f64 = paths.path_increments(i).iter().sum();
        let expected = c * wt - 0.5 * c * c;
        assert!((w.log_weight(i, 20) - expected).abs() < 1e-12);
    }
}

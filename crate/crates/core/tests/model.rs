use weakmfg::measure::EmpiricalMeasure;
use weakmfg::model::*;
use weakmfg::registry::Params;

fn dirac() -> EmpiricalMeasure {
    EmpiricalMeasure::dirac(&[0.0])
}

#[test]
fn tilted_quadratic_control_is_shifted() {
    let m = QuadraticCostModel::new(1, Box::new(ConstantWeight::new(2.0).unwrap()), 0.5).unwrap();
    let a = optimal_control(&m, &[1.2], &[0.4], &dirac(), NewtonOptions::default()).unwrap();
    assert!((a[0] - (0.4 + 0.5 * 1.2) / 4.0).abs() < 1e-12);
}

#[test]
fn quadratic_driver_and_hamiltonian() {
    let m = QuadraticCostModel::new(1, Box::new(ConstantWeight::new(1.0).unwrap()), 0.0).unwrap();
    let opts = NewtonOptions::default();
    // α̂ = z/2: F = z²/4 and H = −z²/4
    assert!((driver(&m, &[0.0], &[3.0], &dirac(), opts).unwrap() - 2.25).abs() < 1e-10);
    assert!((hamiltonian(&m, &[0.0], &[3.0], &dirac(), opts).unwrap() + 2.25).abs() < 1e-10);
}

#[test]
fn quartic_control_solves_the_cubic() {
    let m = QuarticCostModel::new(1, 0.0);
    let a = optimal_control(&m, &[0.0], &[32.0], &dirac(), NewtonOptions::default()).unwrap();
    // 4a³ = 32
    assert!((a[0] - 2.0).abs() < 1e-8, "{a:?}");
}

#[test]
fn zero_cost_has_no_minimizer() {
    let m = ZeroCostModel::new(1, 1);
    assert!(optimal_control(&m, &[0.0], &[1.0], &dirac(), NewtonOptions::default()).is_err());
    let z = ZeroDriver::new(1, 1);
    assert_eq!(z.eval(&[0.3], &[5.0], &dirac(), None).unwrap().value, 0.0);
}

#[test]
fn model_driver_linearization_matches_finite_differences() {
    let m = std::sync::Arc::new(
        QuadraticCostModel::new(1, Box::new(OscillatingWeight::new(2.0, 1.0).unwrap()), 0.0).unwrap(),
    );
    let d = ModelDriver::new(m);
    let mu = EmpiricalMeasure::uniform(vec![0.1, 0.4], 1).unwrap();
    let (x, z) = ([0.7], [1.3]);
    let lin = d.linearize(&x, &z, &mu, None).unwrap();
    let h = 1e-6;
    let f = |x: f64, z: f64| d.eval(&[x], &[z], &mu, None).unwrap().value;
    let fx = (f(x[0] + h, z[0]) - f(x[0] - h, z[0])) / (2.0 * h);
    let fz = (f(x[0], z[0] + h) - f(x[0], z[0] - h)) / (2.0 * h);
    assert!((lin.grad_x[0] - fx).abs() < 1e-6, "{:?} vs {fx}", lin.grad_x);
    assert!((lin.grad_z[0] - fz).abs() < 1e-6, "{:?} vs {fz}", lin.grad_z);
}

#[test]
fn registry_builds_and_rejects_models() {
    let reg = model_registry();
    assert_eq!(reg.names(), vec!["quadratic", "quartic", "zero"]);
    let q = reg.build("quadratic", &Params::new().with("dim", 2usize)).unwrap();
    assert_eq!(q.dim_state(), 2);
    assert!(reg.build("quadratic", &Params::new().with("bogus", 1.0)).is_err());
    assert!(reg.build("cubic", &Params::new()).is_err());
}

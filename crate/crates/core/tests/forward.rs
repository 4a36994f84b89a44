use weakmfg::forward::*;
use weakmfg::registry::Params;

fn grid(steps: usize) -> TimeGrid {
    TimeGrid::new(0.0, 1.0, steps).unwrap()
}

#[test]
fn same_seed_same_paths_other_seed_other_paths() {
    let vfs = SineField::new(1.0);
    let init = InitialLaw::Point(vec![0.5]);
    let a = simulate_forward(&vfs, &Drift::ItoCorrection, &init, grid(30), 500, 1).unwrap();
    let b = simulate_forward(&vfs, &Drift::ItoCorrection, &init, grid(30), 500, 1).unwrap();
    let c = simulate_forward(&vfs, &Drift::ItoCorrection, &init, grid(30), 500, 2).unwrap();
    assert_eq!(a.states(), b.states());
    assert_eq!(a.increments(), b.increments());
    assert_ne!(a.states(), c.states());
}

#[test]
fn particle_streams_do_not_depend_on_the_ensemble_size() {
    let vfs = ConstantFields::scaled_identity(2, 1.0);
    let init = InitialLaw::Point(vec![0.0, 0.0]);
    let small = simulate_forward(&vfs, &Drift::Zero, &init, grid(10), 10, 4).unwrap();
    let large = simulate_forward(&vfs, &Drift::Zero, &init, grid(10), 1000, 4).unwrap();
    for i in 0..10 {
        assert_eq!(small.path(i), large.path(i));
    }
}

#[test]
fn linear_field_tracks_the_exponential_of_brownian_motion() {
    // dX = X∘dW from 1 is exp(W); the Itô-corrected Euler scheme converges strongly
    let vfs = LinearField::new(1.0);
    let paths = simulate_forward(&vfs, &Drift::ItoCorrection, &InitialLaw::Point(vec![1.0]), grid(1000), 2000, 3).unwrap();
    let mut err = 0.0;
    for i in 0..2000 {
        let w: f64 = paths.path_increments(i).iter().sum();
        err += (paths.state(i, 1000)[0] - w.exp()).abs();
    }
    err /= 2000.0;
    assert!(err < 0.05, "mean strong error {err}");
}

#[test]
fn heisenberg_second_coordinate_has_the_area_variance() {
    // from the origin X₂(1) = ∫W₁dW₂, variance ∫₀¹ t dt = 1/2
    let paths = simulate_forward(&HeisenbergFields, &Drift::Zero, &InitialLaw::Point(vec![0.0, 0.0]), grid(200), 20_000, 5)
        .unwrap();
    let x2: Vec<f64> = (0..20_000).map(|i| paths.state(i, 200)[1]).collect();
    let mean = x2.iter().sum::<f64>() / 20_000.0;
    let var = x2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 19_999.0;
    assert!(mean.abs() < 0.02, "mean {mean}");
    assert!((var - 0.5).abs() < 0.03, "variance {var}");
}

#[test]
fn tangent_flow_inverse_is_an_inverse() {
    let vfs = SineField::new(0.8);
    let paths = simulate_forward(&vfs, &Drift::ItoCorrection, &InitialLaw::Point(vec![0.3]), grid(100), 200, 6).unwrap();
    let tf = tangent_flow(&vfs, &Drift::ItoCorrection, &paths, &Retention::Nodes(vec![50])).unwrap();
    for i in 0..200 {
        for n in [0, 50, 100] {
            let j = tf.jacobian(i, n).unwrap()[0];
            let inv = tf.inverse(i, n).unwrap()[0];
            assert!((j * inv - 1.0).abs() < 1e-10);
        }
    }
    assert!(tf.jacobian(0, 10).is_err());
}

#[test]
fn tangent_flow_matches_a_shifted_start() {
    let vfs = SineField::new(1.0);
    let paths = simulate_forward(&vfs, &Drift::ItoCorrection, &InitialLaw::Point(vec![0.5]), grid(100), 100, 7).unwrap();
    let tf = tangent_flow(&vfs, &Drift::ItoCorrection, &paths, &Retention::All).unwrap();
    let h = 1e-6;
    let up = shifted_start(&vfs, &Drift::ItoCorrection, &paths, &[h]).unwrap();
    let down = shifted_start(&vfs, &Drift::ItoCorrection, &paths, &[-h]).unwrap();
    for i in 0..100 {
        let fd = (up.state(i, 100)[0] - down.state(i, 100)[0]) / (2.0 * h);
        let j = tf.jacobian(i, 100).unwrap()[0];
        assert!((fd - j).abs() < 1e-5 * (1.0 + j.abs()), "particle {i}: {fd} vs {j}");
    }
}

#[test]
fn heisenberg_is_full_rank_away_from_the_axis() {
    let r = hormander_rank(&HeisenbergFields, &[1.0, 0.0], 0).unwrap();
    assert!(r.full_rank());
    assert_eq!(r.labels.len(), 2);
    let deep = hormander_rank(&HeisenbergFields, &[0.0, 0.0], 2).unwrap();
    assert_eq!(deep.rank, 2);
}

#[test]
fn registry_rejects_unknown_fields_and_lists_the_known_ones() {
    let err = field_registry().build("spiral", &Params::new()).err().unwrap().to_string();
    assert!(err.contains("spiral") && err.contains("heisenberg"), "{err}");
    let sine = field_registry().build("sine", &Params::new()).unwrap();
    assert_eq!((sine.dim_state(), sine.dim_noise()), (1, 1));
}

#[test]
fn invalid_grids_are_rejected() {
    assert!(TimeGrid::new(0.0, 1.0, 0).is_err());
    assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
    let vfs = ConstantFields::scaled_identity(1, 1.0);
    assert!(simulate_forward(&vfs, &Drift::Zero, &InitialLaw::Point(vec![0.0]), grid(5), 0, 1).is_err());
    assert!(simulate_forward(&vfs, &Drift::Zero, &InitialLaw::Point(vec![0.0, 1.0]), grid(5), 3, 1).is_err());
}

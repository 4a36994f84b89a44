//! Empirical measures, 2-Wasserstein distances and Lions-derivative proxies.

mod empirical;
mod lions;
mod wasserstein;

pub use empirical::{EmpiricalMeasure, LawFlow};
pub use lions::{default_lions_step, lions_derivative, lipschitz_probe_dmu, LipschitzReport};
pub use wasserstein::{
    assignment_w2_squared, coupling_bound_check, hungarian, quantile_w2_squared, wasserstein2,
    wasserstein2_subsampled, CouplingBound, W2Estimate, W2Mode, EXACT_MAX_PARTICLES,
    SLICED_DIRECTIONS,
};

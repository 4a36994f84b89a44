//! The decoupling field u(t, x, μ_t) and its representation diagnostics:
//! Z = ∇ₓu·σ, D_uY_t through tangent flows, the variational BSDE, the
//! master-equation residual and a density proxy.

mod density;
mod field;
mod malliavin;
mod residual;
mod tangent;

pub use density::*;
pub use field::{check_z_representation, estimate_master_field, MasterFieldEstimate, ZRepresentationReport};
pub use malliavin::*;
pub use residual::*;
pub use tangent::*;

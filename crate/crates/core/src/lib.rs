//! Particle solver and structural diagnostics for weak-formulation
//! mean-field games: McKean–Vlasov forward–backward SDEs on empirical laws,
//! Girsanov reweighting, tangent flows, Hörmander brackets and master-field
//! estimates.

pub mod error;
pub mod linalg;
pub mod master;
pub mod measure;
pub mod mfg;
pub mod forward;
pub mod model;
pub mod bsde;
pub mod reduce;
pub mod registry;
pub mod rng;
pub mod terminal;

pub use error::{Error, Result};

//! Weak-formulation equilibrium: Girsanov weights, weak cost and the damped
//! Picard fixed point on the law flow.

mod girsanov;
mod picard;

pub use girsanov::*;
pub use picard::*;

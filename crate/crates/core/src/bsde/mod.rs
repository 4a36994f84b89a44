//! Backward solver for the quadratic-growth BSDE on a frozen law flow.

mod regression;
mod solver;

pub use regression::*;
pub use solver::*;

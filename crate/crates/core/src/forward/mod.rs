//! Forward particle dynamics: driftless diffusions driven by vector fields,
//! their tangent flows and Lie-bracket rank.

mod fields;
mod hormander;
mod paths;
mod tangent;

pub use fields::*;
pub use hormander::*;
pub use paths::*;
pub use tangent::*;

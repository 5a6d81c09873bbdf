//! Distance estimators between the sampler law and `q_1`, and numerical
//! checks of the identities and bounds used in the convergence analysis.

mod distance;
mod theory;

pub use distance::*;
pub use theory::*;

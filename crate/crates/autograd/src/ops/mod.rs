mod elementwise;
mod linalg;
mod nn;
mod reduce;
pub(crate) mod shape;

pub use nn::{kl_divergence, KL_EPS, NORMALIZATION_TOL};

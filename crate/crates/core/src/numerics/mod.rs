//! Deterministic dense linear algebra and random sampling used by every
//! math module in the crate.

mod chol;
mod matrix;
mod rng;

pub use chol::{cholesky_psd, tri_solve, CholeskyFactor, BASE_JITTER};
pub(crate) use chol::{tri_solve_lower, tri_solve_lower_tri};
pub use matrix::DenseMatrix;
pub use rng::RngStream;

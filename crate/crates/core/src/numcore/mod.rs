//! Dense linear algebra and seeded sampling.
//!
//! Everything here is deterministic: sums run in index order and all
//! randomness flows through [`SeededRng`].

mod matrix;
mod rng;
mod scalar;

pub use matrix::{axpy, cholesky, dot, l2_norm, squared_distance, DenseMatrix};
pub use rng::{standard_normal, SeededRng};
pub use scalar::Scalar;

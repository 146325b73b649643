//! Diagonal-contraction regularizers for heavy-tailed random matrices,
//! parallelepiped coverings of random ellipsoids, compressible/incompressible
//! sphere decomposition with certified LCD scans, and seeded Monte Carlo
//! experiments for the smallest singular value.

pub mod coverings;
pub mod distributions;
pub mod error;
pub mod geometry;
pub mod invertibility;
pub mod norms;
pub mod regularizer;
pub mod rng;

pub use error::{Error, Result};

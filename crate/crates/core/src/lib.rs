//! Bloch resonances of periodic bubbly media in the subwavelength regime.
//!
//! The crate computes quasi-periodic layer potentials on a single bubble in
//! the unit cell, the quasi-periodic capacity and its expansion near the
//! lower band edge, Bloch eigenvalues from the full boundary-integral
//! system, and the effective anisotropic model obtained by homogenization.
//! Independent finite-difference and plane-wave solvers are included as
//! cross checks.

// `!(x > 0.0)` rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bloch;
pub mod capacity;
pub mod error;
pub mod geometry;
pub mod homogenize;
pub mod lattice_green;
pub mod layer_ops;
pub mod oracle;
pub mod quadrature;
pub mod singular;
pub mod vec3;

pub use error::{Error, Result};
pub use num_complex::Complex64 as C64;

//! Numerical toolkit for generalized bounded-mean-oscillation seminorms of
//! vector-valued fields.
//!
//! The library evaluates a catalog of cell functionals `alpha_p(u, D')` on
//! scaled, rotated and translated copies of a reference cell, assembles them
//! into packing-based seminorm lower bounds `G_eps(u, Omega)`, sweeps the
//! scale parameter to extrapolate limits or divergence rates, and evaluates
//! the limit integrand `psi` together with its null space and projection.

pub mod characterize;
pub mod error;
pub mod field;
pub mod functionals;
pub mod geometry;
pub mod psi;
pub mod quad;
pub mod seminorm;

pub use error::{Error, Result};

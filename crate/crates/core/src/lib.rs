//! Surrogates of the solution map `y -> u(., y)` for affine-parameterized
//! diffusion problems on the unit square.
//!
//! The pipeline is:
//!
//! 1. [`mesh_fem`]: P1 finite elements with one stiffness block per affine term.
//! 2. [`random_field`]: the affine coefficient `a(x, y) = a_0(x) + sum_n a_n(x) y_n`
//!    and its coercivity lower bound.
//! 3. [`polyspace`]: normalized Legendre bases and anisotropic index sets.
//! 4. [`dls`]: discrete least-squares projection onto an index set.
//! 5. [`reduced_basis`]: weak-greedy reduced basis with an offline/online
//!    residual estimator.
//! 6. [`rb_dls`]: least-squares fit of the reduced coefficients, evaluated in
//!    factored form `V (C^rb)^T l(y)`.
//! 7. [`experiments`]: configuration, result records, the surrogate container
//!    format and the two benchmark studies.

pub mod dls;
pub mod error;
pub mod experiments;
pub mod mesh_fem;
pub mod polyspace;
pub mod random_field;
pub mod rb_dls;
pub mod reduced_basis;

pub use error::{Error, Result};

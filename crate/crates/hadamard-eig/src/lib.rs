//! First and second one-sided derivatives of Laplacian eigenvalues under
//! domain deformation.
//!
//! A family of bi-Lipschitz maps `T_t` deforms a reference polygon; the
//! Dirichlet or Neumann Laplacian on the deformed domain is pulled back to
//! the reference mesh, where piecewise-linear finite elements turn it into
//! a generalized eigenvalue problem whose stiffness and mass forms depend
//! smoothly on `t`. Eigenvalues sorted by magnitude are only Lipschitz in
//! `t` — curves kink where branches cross — but each *cluster* of nearly
//! equal eigenvalues carries well-defined one-sided derivatives:
//!
//! * [`hadamard::first_derivatives`] diagonalizes the derivative form on a
//!   cluster's invariant subspace, yielding the slopes `nu` and the basis
//!   that splits the cluster;
//! * [`hadamard::second_derivatives`] solves a constrained corrector
//!   problem per split branch and diagonalizes the curvature form,
//!   yielding `sigma`;
//! * [`rearrange`] samples eigenvalue curves over a parameter grid and
//!   permutes branch labels at crossings so each labeled branch is
//!   differentiable through them;
//! * [`oracle`] cross-checks every computed derivative against Richardson-
//!   extrapolated one-sided finite differences, on both finite-element
//!   families and synthetic matrix pencils with planted multiple
//!   eigenvalues.
//!
//! The [`runner`] module ties these together behind three batch commands
//! (`report`, `sweep`, `oracle`) configured by a JSON file; the binary in
//! `main.rs` is a thin CLI over it.

// Validation code uses `!(x > 0.0)` deliberately: unlike `x <= 0.0` it also
// rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assemble;
pub mod config;
pub mod deform;
pub mod error;
pub mod gevp;
pub mod hadamard;
pub mod mesh;
pub mod oracle;
pub mod quadrature;
pub mod rearrange;
pub mod runner;
pub mod sparse;

pub use error::{Error, Result};

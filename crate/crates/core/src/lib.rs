//! Finite-element solver for the spin-polarized exchange-only LDA (XLDA)
//! model of the hydrogen molecule.
//!
//! The crate discretizes the two-orbital XLDA energy functional on an
//! adaptively refined tetrahedral mesh of a cubic box, finds stationary
//! points by self-consistent field iteration, classifies them through the
//! constrained Hessian, sweeps the exchange strength `alpha` and the
//! internuclear parameter `R` to map symmetry-breaking bifurcations, and
//! checks the large-`alpha` localization limit against the radial ground
//! state of the semilinear problem.
//!
//! Modules follow the pipeline:
//! - [`mesh`]: box mesh, local bisection refinement, uniform refinement,
//!   refinement hierarchies.
//! - [`operators`]: P1 stiffness/mass/weighted-mass assembly and nodal
//!   fields.
//! - [`linsolve`]: preconditioned conjugate gradients and a geometric
//!   multigrid V-cycle built from the refinement hierarchy.
//! - [`hartree`]: Poisson solves for the Hartree potential with multipole
//!   Dirichlet boundary data.
//! - [`scf`]: the self-consistent field loop with Helmholtz updates and
//!   orbital-energy corrections.
//! - [`hessian`]: second variation of the constrained Lagrangian and
//!   stationary-point classification.
//! - [`continuation`]: parameter sweeps, branch tracking, bifurcation
//!   detection, phase diagram assembly.
//! - [`soliton`]: radial shooting solver for the semilinear limit profile
//!   and rescaled comparisons.

pub mod checkpoint;
pub mod config;
pub mod continuation;
pub mod error;
pub mod hartree;
pub mod hessian;
pub mod linsolve;
pub mod mesh;
pub mod operators;
pub mod scf;
pub mod soliton;
pub(crate) mod util;

pub use error::{Error, Result};

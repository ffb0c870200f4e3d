//! Solvers and certificates for mean field games on invariant domains.
//!
//! The state domain is bounded and the controlled dynamics never leave it, so
//! the diffusion may degenerate on the boundary and no boundary condition is
//! imposed there. The crate provides
//!
//! - [`geometry`]: oriented distances, boundary layers and product barriers,
//! - [`models`]: diffusions, Hamiltonians and couplings,
//! - [`invariance`]: sampled checks of the invariance inequalities,
//! - [`hjb`] and [`fp`]: finite-volume solvers for the two halves of the system,
//! - [`mfg`]: the damped fixed point and its duality-gap certificate,
//! - [`sde`]: Monte Carlo viability and law checks.

pub mod error;
pub mod field;
pub mod fp;
pub mod geometry;
pub mod grid;
pub mod hjb;
pub mod invariance;
pub mod linalg;

pub mod mfg;
pub mod models;
mod operator;
pub mod sde;

pub mod types;

pub use error::{Error, Result};
pub use field::{DensityField, SpaceTimeField, TimeAxis};
pub use geometry::{BarrierFunction, DomainKind, DomainSpec, SmoothPiece};
pub use grid::{CartesianGrid, MaskedGrid};
pub use linalg::LinearSolver;
pub use models::{Coupling, DiffusionField, HamiltonianModel};
pub use types::{vector, Matrix, Vector, VectorField};

//! Diffusion matrices, Hamiltonians and coupling terms.

mod coupling;
mod diffusion;
mod hamiltonian;
mod structure;

pub use coupling::{Coupling, CouplingF, CouplingG, CouplingMode, LocalCoupling};
pub use diffusion::{divergence_drift, DiffusionField};
pub use hamiltonian::{
    example1_hamiltonian, example2_hamiltonian, truncate_hamiltonian, Growth, GrowthKind,
    HamiltonianModel, RunningCost,
};
pub use structure::{check_structure, StructureReport, StructureSamples};

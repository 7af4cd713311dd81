//! Reciprocal-space crystal representation.
//!
//! A crystal is a lattice plus species-resolved fractional coordinates stored
//! exactly on a rational grid. Its truncated Fourier transform is a complex
//! matrix indexed by wave vector and species slot, from which the original
//! grid coordinates can be recovered exactly.

pub mod crystal;
pub mod error;
pub mod lattice;
pub mod reciprocal;
pub mod recovery;

pub use crystal::{
    apply_symmetry, snap_coords, synth_crystal, validate_crystal, Crystal, SpeciesSet,
    SymmetryOp, Violation, MAX_ATOMIC_NUMBER, MAX_SPECIES,
};
pub use error::{Error, Result};
pub use lattice::{lattice_to_log, log_to_lattice, polar_decompose, LatticeLog, LatticeMatrix};
pub use reciprocal::{
    build_wave_set, fourier_forward, symmetry_residual, symmetry_transform, FourierRepr,
    Truncation, WaveSet, NUM_SLOTS,
};
pub use recovery::{
    density_grid, recover, recover_species, stage1_peaks, stage2_greedy, stage3_newton,
    Acceptance, DensityGrid, RecoveryConfig, RecoveryResult, Stage,
};

//! Multiscale tumour-growth simulation core.
//!
//! A Cellular Potts Model ([`cpm`]) evolves tumour cells on a 3D voxel
//! lattice confined to a pleural mask, while oxygen, nutrient and cytokine
//! concentrations obey reaction-diffusion equations solved by a finite-volume
//! discretization ([`fvm`]) and a restarted GMRES solver ([`krylov`]). The
//! PDE solve is restricted to a dynamically tracked bounding box around the
//! tumour ([`lattice`]) and decomposed into slabs across message-passing
//! workers ([`partition`], [`engine`]). [`perf`] captures the parallel
//! performance metrics and [`sim`] ties everything into a configurable
//! simulation driver.

// Indexed loops in the stencil and lattice kernels mirror the (i, j, k)
// math; iterator rewrites obscure it.
#![allow(clippy::needless_range_loop)]
#![allow(clippy::manual_is_multiple_of)]
#![allow(clippy::field_reassign_with_default)]

pub mod cpm;
pub mod engine;
pub mod fvm;
pub mod krylov;
pub mod lattice;
pub mod partition;
pub mod perf;
pub mod sim;

pub use lattice::{BoundingBox, Lattice3D, ScalarField, VoxelMask};

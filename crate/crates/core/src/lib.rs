//! Weak KAM toolkit on the flat torus: discrete action kernels, Lax-Oleinik
//! operators and their commutators, cut-locus and controllability diagnostics.

pub mod config;
pub mod controllability;
pub mod cli;
pub mod cut_locus;
pub mod dynamics;
pub mod error;
pub mod grid;
pub mod hamiltonian;
pub mod kernel;
pub mod lax_oleinik;
pub mod nonsmooth;

pub use error::{Error, Result};
pub use grid::{periodic_distance, GridFunction, TorusGrid};
pub use hamiltonian::{HamiltonianSpec, Potential};
pub use kernel::{compose, kernel_power, small_time_kernel, ActionKernel, KernelLadder, KernelParams, RelayPath};

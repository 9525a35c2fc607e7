//! Two-scale elastic shape optimization toolkit.
//!
//! The offline half of the pipeline optimizes periodic microcells: phase-field
//! topology optimization on the unit cell with homogenization equality
//! constraints drives the effective elasticity tensor to a prescribed isotropic
//! target, while fixed material bridges at the cell boundary keep every cell
//! printable next to every other cell. Converged cells are collected in a
//! database over the (ν, E) plane.
//!
//! The online half fits a cubic B-spline chart over the realizable (ν, E)
//! region together with a resampled cost spline, then runs a restricted free
//! material optimization on a macroscopic domain with per-cell spline
//! coordinates as design variables. A final assembly step tiles the optimized
//! macro design with the nearest database microcells into one printable voxel
//! structure.

pub mod assemble;
pub mod cellopt;
pub mod dbase;
pub mod error;
pub mod fem;
pub mod grid;
pub mod homogenize;
pub mod macroopt;
pub mod nlp;
pub mod phasefield;
pub mod sparse;
pub mod spline;
pub mod tensor;

pub use error::{Error, Result};

/// Version tag embedded in every manifest and JSON output.
pub const FORMAT_VERSION: u32 = 1;

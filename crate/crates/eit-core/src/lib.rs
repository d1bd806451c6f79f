//! Two-stage electrical impedance tomography on the unit disk.
//!
//! Stage one learns a map from boundary voltage differences to the internal
//! potential field on a Cartesian grid; stage two fits a coordinate network
//! for the conductivity against that field through the governing equation.
//! Everything runs on the CPU with deterministic seeding.

pub mod calculus;
pub mod dataset;
pub mod error;
pub mod fem;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod render;
pub mod sparse;
pub mod stage1;
pub mod stage2;

pub use error::{EitError, Result};

//! Numerical toolkit for quantitative stability of Fokker-Planck equations.
//!
//! The crate computes logarithmic transport distances between discrete
//! measures, simulates coupled SDEs, solves the Fokker-Planck and continuity
//! equations on grids, runs the Zvonkin transformation, and assembles the
//! right-hand sides of the stability bounds so they can be compared against
//! measured distances.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coefficients;
pub mod error;
pub mod experiments;
pub mod fpe;
pub mod measures;
pub mod simulate;
pub mod stability;
pub mod stats;
pub mod transport;
pub mod zvonkin;

pub use error::{Error, Result};
pub use measures::{BoxGrid, GridDensity, MeasureSummary, ParticleCloud};
pub use transport::{CostSpec, TransportPlan};

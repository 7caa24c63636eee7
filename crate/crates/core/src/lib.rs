//! Synthetic control for outcomes that live in metric spaces.
//!
//! Outcomes are embedded into a discretized Hilbert space, weights are fit by
//! a simplex-constrained least-squares program, optionally corrected by a
//! ridge term on basis coefficients, and mapped back through the space
//! adapter.

pub mod error;
pub mod estimator;
pub mod exec;
pub mod hilbert;
pub mod inference;
pub mod simulate;
pub mod spaces;
pub mod weights;

pub use error::{Error, Result};
pub use exec::Execution;
pub use hilbert::{BasisKind, BasisSystem, Grid, HilbertElement, Quadrature};
pub use spaces::{MetricObject, SpaceAdapter, SpaceKind, SpdMetric};

//! Randomized solvers for consistent linear systems built around penalty and
//! augmented Lagrangian sketching, together with the spectral analysis toolkit
//! that certifies their convergence rates and a benchmark harness.
//!
//! Module map:
//! - [`linsys`]: problem representation, reference solution, SPD utilities.
//! - [`sketch`]: sketch-matrix sources and sampling rules (uniform, convenient,
//!   greedy, capped, Gaussian).
//! - [`solvers`]: the generic sketch-project / penalty / augmented-Lagrangian
//!   iteration engines and the driver loop.
//! - [`special`]: closed-form fast paths (Kaczmarz, coordinate-descent,
//!   spectral, block, Gaussian and iterative-refinement variants).
//! - [`analysis`]: per-sketch operators, spectral constants, rate bounds, and
//!   identity checkers used as test oracles.
//! - [`experiment`]: problem generation, seeded solver sweeps, CSV traces and
//!   JSON reports.

pub mod analysis;
pub mod error;
pub mod experiment;
pub mod linsys;
pub mod sketch;
pub mod solvers;
pub mod special;

#[cfg(test)]
pub(crate) mod test_util;

pub use analysis::{SketchOperators, SpectralReport};
pub use error::{Error, Result};
pub use linsys::{ProjectionProblem, SpdOperator};
pub use sketch::{FiniteSketchSet, GaussianSketch, RuleKind, SamplingRule, SketchSample};
pub use solvers::{IterateState, Method, RunReport, SketchSource, SolverConfig, TraceRecord};

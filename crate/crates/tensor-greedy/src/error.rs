//! Crate-wide error type.

use crate::tensor::SeparatedFunction;
use thiserror::Error;

/// All failure modes of the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Mesh construction with fewer than two intervals, or inconsistent nodes.
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),

    /// Vector/matrix dimensions do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An evaluation point left the admissible domain.
    #[error("out of domain: {0}")]
    OutOfDomain(String),

    /// Thomas elimination hit a vanishing pivot.
    #[error("singular tridiagonal system: pivot {index} has magnitude {magnitude:e}")]
    SingularSystem { index: usize, magnitude: f64 },

    /// A fixed-point factor collapsed to (numerical) zero, so the Euler
    /// system's normalizing products are meaningless.
    #[error("degenerate factor in rank-one fixed point (norm below 1e-300)")]
    DegenerateFactor,

    /// The rank-one fixed point failed to converge even after restarts.
    #[error("rank-one enrichment failed to converge at greedy iteration {iteration}")]
    EnrichmentFailure { iteration: usize },

    /// Market data rejected (correlation not positive-definite, bad sigma, ...).
    #[error("model rejected: {0}")]
    ModelRejection(String),

    /// Requested time step violates the L2-stability bound and the caller did
    /// not override.
    #[error("time step {dt:e} exceeds the stability bound {dt_max:e}; pass the override to proceed")]
    UnstableTimeStep { dt: f64, dt_max: f64 },

    /// Time stepping aborted midway; carries the last completed slice.
    #[error("solver stopped at time step {step}: {source}")]
    PartialSolution {
        step: usize,
        last_good: Box<SeparatedFunction>,
        #[source]
        source: Box<Error>,
    },

    /// The reference function of a relative metric vanishes on the grid.
    #[error("degenerate reference: comparison function vanishes on the whole grid")]
    DegenerateReference,

    /// An operation was asked for in a dimension it does not support.
    #[error("unsupported dimension {dim} (limit {max}): {context}")]
    UnsupportedDimension {
        dim: usize,
        max: usize,
        context: &'static str,
    },

    /// Bad run configuration (inconsistent knobs, mismatched solution files, ...).
    #[error("configuration: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

//! Error type shared by every module of the crate.

use thiserror::Error;

/// Failures surfaced by samplers, value estimators and the geometry layer.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A caller-supplied argument is outside the documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The schedule makes a backward step undefined (`1 - abar_t == 0`).
    #[error("degenerate step at t = {t}: 1 - abar_t is zero")]
    DegenerateStep { t: usize },

    /// The exact denoiser has no data mass consistent with the observed tokens.
    #[error("zero support: no data sequence agrees with the unmasked tokens")]
    ZeroSupport,

    /// Logarithm requested at or beyond the cut locus of SO(3).
    #[error("branch cut: rotation angle {angle} is within tolerance of pi")]
    BranchCut { angle: f64 },

    /// Every importance weight underflowed or was non-finite.
    #[error("degenerate weights at step {step}: all weights are zero or non-finite")]
    DegenerateWeights { step: usize },

    /// A gradient was requested from a reward or value without one.
    #[error("not differentiable: {0}")]
    NotDifferentiable(String),

    /// The selected value model cannot serve the requested operation.
    #[error("unsupported value model: {0}")]
    UnsupportedValueModel(String),

    /// Iterative refinement stopped making feasible proposals.
    #[error("refinement stalled: {rejected} consecutive proposals violated the constraint")]
    Stall { rejected: usize },

    /// The per-state or per-table enumeration cap was exceeded.
    #[error("state space too large: {states} states exceeds the cap of {cap}")]
    TooLarge { states: u64, cap: u64 },
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

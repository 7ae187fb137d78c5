use thiserror::Error;

/// Errors raised by the chart, Stein, and testing machinery.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MksdError {
    #[error("chart point lies on the singular set of the chart (theta = {theta})")]
    SingularChartPoint { theta: f64 },

    #[error("rotation is in gimbal lock (|X33| = {x33}); jitter or reject the point")]
    GimbalLock { x33: f64 },

    #[error("expected {expected} coordinates, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("{what} lives on {found:?}, expected {expected:?}")]
    ChartMismatch {
        what: &'static str,
        expected: crate::manifold::Manifold,
        found: crate::manifold::Manifold,
    },

    #[error("zeroth-order Stein kernel needs a nonempty reference sample")]
    EmptyReferenceSample,

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("symmetric eigendecomposition failed")]
    EigendecompositionFailure,

    #[error("kernel parameter grid is empty")]
    EmptyGrid,

    #[error("quadrature under-resolved: slope changed by {rel_change:e} (relative) on grid doubling from {grid_size}")]
    QuadratureUnderResolved { grid_size: usize, rel_change: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, MksdError>;

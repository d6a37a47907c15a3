use thiserror::Error;

/// Errors raised anywhere in the estimation and testing pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("kernel order infeasible: {0}")]
    OrderInfeasible(String),

    #[error("unknown kernel family `{0}`")]
    UnknownFamily(String),

    #[error("quadrature grid too coarse: {what} moved by {change:e} (tolerance {tol:e})")]
    GridTooCoarse { what: String, change: f64, tol: f64 },

    #[error("censoring degenerate: G_n(Z_{index}) = 0 for an uncensored observation with psi != 0")]
    CensoringDegenerate { index: usize },

    #[error("density estimate below floor at observations {indices:?}")]
    DensityFloorHit { indices: Vec<usize> },

    #[error("axis {axis} out of range for dimension {dim}")]
    AxisOutOfRange { axis: usize, dim: usize },

    #[error("nonpositive variance estimate V = {v_hat:e} (B = {b_hat:e})")]
    NonpositiveVariance { b_hat: f64, v_hat: f64 },

    #[error("bandwidth exponent gamma = {gamma} outside feasibility band ({lo}, {hi})")]
    InfeasibleExponent { gamma: f64, lo: f64, hi: f64 },

    #[error("assumption {clause} violated: {message}")]
    AssumptionViolated { clause: String, message: String },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{failed} of {total} replicates failed (first failure: {first})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },
}

impl Error {
    /// Process exit code for the command-line front-end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::AssumptionViolated { .. } => 2,
            Error::GridTooCoarse { .. }
            | Error::CensoringDegenerate { .. }
            | Error::DensityFloorHit { .. }
            | Error::NonpositiveVariance { .. }
            | Error::TooManyFailures { .. } => 3,
            Error::OrderInfeasible(_)
            | Error::UnknownFamily(_)
            | Error::AxisOutOfRange { .. }
            | Error::InfeasibleExponent { .. }
            | Error::InvalidSample(_)
            | Error::InvalidConfig(_) => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

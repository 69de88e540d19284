use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("velocity domain too small: v_max = {v_max} but the data reach |v| = {needed}")]
    DomainTooSmall { v_max: f64, needed: f64 },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time step too large for the flow map: dt * |grad u_eps| = {product} (must stay below 1)")]
    StepTooLarge { product: f64 },

    #[error("quadrature did not converge after {refinements} refinements (last relative change {last_change:e})")]
    QuadratureNotConverged { refinements: usize, last_change: f64 },

    #[error("CFL violation: dt = {dt:e} exceeds dx^2/(2 d beta) = {limit:e}")]
    Cfl { dt: f64, limit: f64 },

    #[error("invariant `{invariant}` violated at step {step}, cell ({i}, {j}): {value:e}")]
    InvariantViolation {
        invariant: &'static str,
        step: usize,
        i: usize,
        j: usize,
        value: f64,
    },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("sub-solution lower bound violated: min phi = {min} < {bound}")]
    LowerBound { min: f64, bound: f64 },

    #[error("gamma selection failed after {halvings} halvings: {reason}")]
    GammaSelection { halvings: usize, reason: String },

    #[error("sampled field: {0}")]
    SampledField(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

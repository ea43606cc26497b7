use alloc::string::String;

/// Errors shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    Numeric(String),
    #[error("structure violation: {0}")]
    Structure(String),
    #[error("trajectory diverged at t = {last_valid_time} s (state norm above {guard:e})")]
    Divergence { last_valid_time: f64, guard: f64 },
    #[error("history does not cover the delay window: {0}")]
    Coverage(String),
    #[error("invalid bisection bracket: {0}")]
    Bracket(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("solver inconclusive: {0}")]
    Inconclusive(String),
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("no rollout with finite cost")]
    NoValidRollout,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

use thiserror::Error;

use crate::solver::SolverError;

/// Inputs whose dimensions do not agree.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("dimension mismatch: {0}")]
pub struct ShapeError(pub String);

impl ShapeError {
    pub fn new(msg: impl Into<String>) -> Self {
        ShapeError(msg.into())
    }
}

/// Returns a [`ShapeError`] unless `got == want`.
pub(crate) fn expect_dim(what: &str, got: usize, want: usize) -> Result<(), ShapeError> {
    if got == want {
        Ok(())
    } else {
        Err(ShapeError(format!("{what}: expected {want}, got {got}")))
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error("horizon T = {t} exceeds the configured cap {cap}")]
    HorizonTooLong { t: f64, cap: f64 },
    #[error("augmented state needs {needed} values, over the budget of {budget}")]
    MemoryBudgetExceeded { needed: usize, budget: usize },
    #[error("iteration {iteration}, task {task}: {source}")]
    Task { iteration: u64, task: usize, source: Box<Error> },
    #[error("{0}")]
    Invalid(String),
}

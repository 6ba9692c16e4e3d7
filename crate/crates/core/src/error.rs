use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Invalid input data (mesh parameters, discount factor, densities, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// A sparse factorization failed or produced a solution that does not satisfy the system.
    ///
    /// For the Newton matrix this signals loss of injectivity of the linearization at the
    /// current iterate.
    #[error("linear solve failure in {context}: {reason}")]
    LinearSolveFailure { context: String, reason: String },

    /// An iterative method exhausted its budget.
    #[error("{solver} did not converge after {iterations} iterations (residual {residual:e})")]
    MaxIterations {
        solver: &'static str,
        iterations: usize,
        residual: f64,
    },

    /// An analysis routine was called on a state that does not satisfy its preconditions.
    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl Error {
    pub(crate) fn linear(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::LinearSolveFailure {
            context: context.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable name of the failure kind.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Validation(_) => "validation",
            Error::LinearSolveFailure { .. } => "linear_solve_failure",
            Error::MaxIterations { .. } => "max_iterations",
            Error::Precondition(_) => "precondition",
        }
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    /// The Hessian could not be factored even after dropping near-collinear
    /// columns. `columns` are indices into the submodel design.
    #[error("singular Hessian on columns {columns:?}")]
    SingularHessian { columns: Vec<usize> },

    #[error("{what} failed to converge after {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    /// Estimation on the second subsample failed for the selected model.
    #[error("estimation failed on selected model {selected:?}: {reason}")]
    SplitEstimation { selected: Vec<usize>, reason: String },

    #[error("{failed} of {requested} splits failed (allowed {allowed}); last failure: {last}")]
    TooManyFailedSplits {
        failed: usize,
        requested: usize,
        allowed: usize,
        last: String,
    },

    #[error("row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("io: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

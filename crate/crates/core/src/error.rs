use thiserror::Error;

/// Errors raised across fitting, recombination and model selection.
#[derive(Debug, Error)]
pub enum Error {
    /// A Cholesky factorization hit a non-positive pivot.
    #[error("{context}: matrix not positive definite at index {index}")]
    Decomposition { context: String, index: usize },

    /// Natural-parameter recombination produced an invalid factor.
    #[error("recombination failed: {0}")]
    Recombination(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("model has no subjects")]
    EmptyData,

    /// A per-piece fit failed during divide-and-recombine.
    #[error("piece {piece} failed: {source}")]
    Piece {
        piece: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("numerical failure for subject {subject}: {message}")]
    Numerical { subject: String, message: String },

    /// Wraps a lower-level error with where it happened.
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn decomposition(context: impl Into<String>, index: usize) -> Self {
        Error::Decomposition {
            context: context.into(),
            index,
        }
    }

    pub(crate) fn with_context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

use thiserror::Error;

/// Errors raised by the particle, operator and driver layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The objective does not provide the requested capability.
    #[error("objective '{objective}' does not support {capability}")]
    Unsupported {
        objective: String,
        capability: &'static str,
    },

    #[error("numerical degeneracy: {0}")]
    Degenerate(String),

    #[error("Hessian kernel is asymmetric: relative asymmetry {asymmetry:.3e} exceeds {tolerance:.1e}")]
    Asymmetric { asymmetry: f64, tolerance: f64 },

    #[error("operator too large for dense storage: {size} > {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error: {0}")]
    Parse(String),

    /// An objective or operator failure inside the driver loop.
    #[error("iteration {iter}: {source}")]
    Step {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

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
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    /// True for errors caused by the user's configuration rather than the run.
    pub fn is_config(&self) -> bool {
        match self {
            Error::Config(_) | Error::Parse(_) => true,
            Error::Context { source, .. } => source.is_config(),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("ill-conditioned design: correlation matrix not positive definite with nugget up to {max_nugget:e}")]
    IllConditioned { max_nugget: f64 },

    #[error("GP fit failed on every start: {}", .diagnostics.join("; "))]
    FitFailure { diagnostics: Vec<String> },

    #[error("degenerate responses: {0}")]
    DegenerateResponse(String),

    #[error("parameter estimation failed{}: {message}", block_label(.block))]
    EstimationFailure { block: Option<usize>, message: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn block_label(block: &Option<usize>) -> String {
    match block {
        Some(b) => format!(" in block {b}"),
        None => String::new(),
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The innermost error, skipping stage labels.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("refusing to materialize {size} entries (bound is {bound})")]
    SizeBound { size: u128, bound: usize },

    #[error("numeric failure{}: {what}", .iteration.map(|i| format!(" at iteration {i}")).unwrap_or_default())]
    Numeric {
        iteration: Option<usize>,
        what: String,
    },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("model format error: {0}")]
    Format(String),

    #[error("unsupported model format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numeric(what: impl Into<String>) -> Self {
        Error::Numeric {
            iteration: None,
            what: what.into(),
        }
    }

    /// Attach the sweep index to a numeric failure; other variants pass through.
    pub fn at_iteration(self, iter: usize) -> Self {
        match self {
            Error::Numeric { what, .. } => Error::Numeric {
                iteration: Some(iter),
                what,
            },
            other => other,
        }
    }
}

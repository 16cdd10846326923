use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate vector: norm {norm:e} is below the 1e-12 threshold{}", context_suffix(.context))]
    DegenerateVector { norm: f64, context: Option<String> },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("invalid label {0}: expected 0 or 1")]
    Label(u8),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("non-finite gradient in {0}")]
    Gradient(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("report has neither findings nor impression text")]
    EmptyReport,

    #[error("split error: {0}")]
    Split(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn context_suffix(context: &Option<String>) -> String {
    match context {
        Some(c) => format!(" ({c})"),
        None => String::new(),
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn degenerate(norm: f64) -> Self {
        Error::DegenerateVector { norm, context: None }
    }

    /// Attach a record identifier to a degenerate-vector error.
    pub fn with_context(self, ctx: impl Into<String>) -> Self {
        match self {
            Error::DegenerateVector { norm, .. } => Error::DegenerateVector {
                norm,
                context: Some(ctx.into()),
            },
            other => other,
        }
    }
}

use crate::graph::NodeRef;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op} expects a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },

    #[error("lookup index {index} out of range for table of {table_rows} rows")]
    LookupOutOfRange { index: usize, table_rows: usize },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("non-finite loss in {context}")]
    NonFiniteLoss { context: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error in document `{doc_id}`: {message}")]
    Validation { doc_id: String, message: String },

    #[error("graph invariant violated: {message}{}", node.map(|n| format!(" (node {n})")).unwrap_or_default())]
    GraphInvariant {
        message: String,
        node: Option<NodeRef>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("fold {fold} (repeat {repeat}) failed: {source}")]
    Fold {
        fold: usize,
        repeat: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("bad file format in {path}: {message}")]
    Format { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs or configuration rather than
    /// failures at runtime; the CLI maps these to exit code 1.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Parse { .. }
                | Error::Validation { .. }
                | Error::Config(_)
                | Error::ShapeMismatch { .. }
                | Error::Format { .. }
        )
    }
}

use thiserror::Error;

/// Errors raised anywhere in the crate.
///
/// The variants map onto the command-line exit-code contract through
/// [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("data validation failed: {0}")]
    Data(String),

    #[error("schema mismatch on `{field}`: {detail}")]
    Schema { field: String, detail: String },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("{0}")]
    Usage(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn schema(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Schema {
            field: field.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code: 1 usage, 2 data validation, 3 schema/compatibility.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config(_) => 1,
            Error::Schema { .. } => 3,
            _ => 2,
        }
    }
}

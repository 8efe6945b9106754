use thiserror::Error;

/// Errors produced by the numeric substrate, the policy model and the
/// experiment drivers built on top of them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error in {op}: {msg}")]
    Numeric { op: &'static str, msg: String },

    #[error("domain error in {op}: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("index {index} out of range for {what} (len {len})")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("kv cache does not match the model: {0}")]
    Cache(String),

    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { component: &'static str, step: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors that stem from user-supplied configuration rather
    /// than from a failure while running.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Json(_))
    }
}

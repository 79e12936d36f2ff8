use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: String, detail: String },

    #[error("unknown op kind `{0}`")]
    UnknownOp(String),

    #[error("invalid graph: {0}")]
    Graph(String),

    #[error("backward called before forward")]
    NoForward,

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("support update rejected at ({row}, {col}): {reason}")]
    SupportUpdate { row: usize, col: usize, reason: String },

    #[error("all saliency scores are zero at prune step {step}")]
    ZeroSaliency { step: usize },

    #[error("synflow objective overflowed ({value}); rescale the network weights")]
    SynflowOverflow { value: f64 },

    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence { epoch: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("malformed {what} at byte offset {offset}: {detail}")]
    Format {
        what: String,
        offset: usize,
        detail: String,
    },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn format(what: &str, offset: usize, detail: impl Into<String>) -> Self {
        Error::Format {
            what: what.to_string(),
            offset,
            detail: detail.into(),
        }
    }
}

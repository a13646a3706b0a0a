use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what} {value} out of range {range}")]
    OutOfRange {
        what: &'static str,
        value: String,
        range: String,
    },

    #[error("x_t token {xt} at position {position} is unreachable from x_0 token {x0} at step {step}")]
    Unreachable {
        position: usize,
        x0: usize,
        xt: usize,
        step: usize,
    },

    #[error("support violation: {0}")]
    Support(String),

    #[error("empty negative set")]
    EmptyNegatives,

    #[error("cannot build negatives: {0}")]
    Negatives(String),

    #[error("enumeration guard exceeded: {0}")]
    Guard(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn range(what: &'static str, value: impl ToString, range: impl Into<String>) -> Self {
        Error::OutOfRange {
            what,
            value: value.to_string(),
            range: range.into(),
        }
    }
}

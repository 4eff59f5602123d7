use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("validation error: {0}")]
    Validation(String),

    /// Misuse of the differentiation tape (non-scalar loss, double backward).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("constraint violated for `{key}`: {msg}")]
    Constraint { key: String, msg: String },

    #[error("weight file: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("weight file: unsupported version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("weight file: payload length error in tensor `{name}`: {msg}")]
    Payload { name: String, msg: String },

    #[error("weight file: shape mismatch for tensor `{name}`: file has {found:?}, config expects {expected:?}")]
    WeightShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("numeric divergence at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for size {size}")]
    Index { index: usize, size: usize },

    #[error("token id {id} is not below vocabulary size {vocab}")]
    Vocab { id: u32, vocab: usize },

    #[error("sequence length {len} exceeds model context {max}")]
    Length { len: usize, max: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate distribution: every entry of a softmax slice is -inf")]
    Degenerate,

    #[error("data error: {0}")]
    Data(String),

    #[error("non-finite gradient in parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("training diverged at step {step}: {consecutive} consecutive non-finite losses")]
    Diverged { step: u64, consecutive: u32 },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("config parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Stream(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Config(_) => "config",
            Error::Index { .. } => "index",
            Error::Vocab { .. } => "vocab",
            Error::Length { .. } => "length",
            Error::Contract(_) => "contract",
            Error::Degenerate => "degenerate",
            Error::Data(_) => "data",
            Error::NonFiniteGradient { .. } => "non_finite_gradient",
            Error::Diverged { .. } => "diverged",
            Error::Checkpoint(_) => "checkpoint",
            Error::Parse { .. } => "parse",
            Error::Io { .. } | Error::Stream(_) => "io",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

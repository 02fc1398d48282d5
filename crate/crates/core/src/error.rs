use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Operand shapes disagree on the named axes.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Scalar expected, got a tensor of this shape.
    #[error("expected a scalar, got shape {0:?}")]
    Rank(Vec<usize>),

    /// Train-mode batch norm needs at least two values per channel.
    #[error("degenerate batch: {count} value(s) per channel in train-mode batch norm")]
    DegenerateBatch { count: usize },

    /// Buffers, statistics and network disagree structurally.
    #[error("configuration error: {0}")]
    Config(String),

    /// A reduction or statistic was asked of an empty collection.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// Invalid scalar argument (out of its domain).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Source training produced a non-finite loss.
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    /// Adaptation produced a non-finite loss.
    #[error("non-finite loss at adaptation step {step}: {diagnostic}")]
    NonFinite { step: u64, diagnostic: String },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension { op, detail: detail.into() }
}

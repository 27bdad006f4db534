//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Two operands whose shapes must conform do not; names both shapes.
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: String,
        left: String,
        right: String,
    },

    /// Input violates a documented precondition.
    #[error("{0}")]
    Validation(String),

    /// The label cannot be emitted in the available frames: CTC needs
    /// `frames >= label length + adjacent repeats`.
    #[error(
        "infeasible CTC label: {frames} frames cannot emit {label_len} labels \
         with {repeats} adjacent repeats (needs at least {min_frames})"
    )]
    InfeasibleLabel {
        frames: usize,
        label_len: usize,
        repeats: usize,
        min_frames: usize,
    },

    /// Structurally feasible label whose total path probability is exactly
    /// zero under the given frame probabilities.
    #[error("infeasible label: total path probability is zero over {frames} frames")]
    UnreachableLabel { frames: usize },

    /// Exhaustive path enumeration refused: the instance is too large.
    #[error("path enumeration refused: {frames} frames exceeds the oracle cap of {cap}")]
    EnumerationCap { frames: usize, cap: usize },

    /// A NaN or infinity appeared where the contract requires finite values.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Structured-text parse failure with its 1-based line number.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Failure attributable to one sample of a batch.
    #[error("sample {index}: {source}")]
    AtSample {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn at_sample(index: usize, source: Error) -> Error {
        Error::AtSample {
            index,
            source: Box::new(source),
        }
    }

    /// True for NaN/Inf failures, which callers treat as numeric (not
    /// usage) errors.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite(_) => true,
            Error::AtSample { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

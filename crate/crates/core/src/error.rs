use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("sample {id} has length {length}, longer than the last stratum boundary {max}")]
    SampleTooLong { id: u64, length: u32, max: u32 },

    #[error("stratum {stratum} exhausted: {needed} samples needed, {available} remaining")]
    PoolExhausted {
        stratum: usize,
        needed: usize,
        available: usize,
    },

    #[error("{items} items cannot be split evenly over {gpus} GPUs")]
    Indivisible { items: usize, gpus: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("clip mode mismatch: operation requires {expected}, config has {got}")]
    ModeMismatch {
        expected: &'static str,
        got: &'static str,
    },

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user input (as opposed to a failure
    /// while running a valid experiment).
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. }
                | Error::Parse { .. }
                | Error::SampleTooLong { .. }
                | Error::Indivisible { .. }
                | Error::DimensionMismatch { .. }
                | Error::ModeMismatch { .. }
        )
    }
}

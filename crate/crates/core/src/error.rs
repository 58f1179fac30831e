use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("finite-difference oracle: non-finite loss when probing coordinate {coordinate}")]
    Oracle { coordinate: usize },
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("degenerate cycle at sample {index}: cycled norm {norm:e}")]
    DegenerateCycle { index: usize, norm: f64 },
    #[error("training diverged at step {step}")]
    Divergence { step: usize, trace: Vec<f64> },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("non-finite loss at step {step}; state left at the last good step")]
    NonFiniteLoss { step: u64 },
    #[error("embedding backend failed after {attempts} attempt(s): {message}")]
    Backend {
        message: String,
        attempts: u32,
        retryable: bool,
    },
}

impl Error {
    pub(crate) fn dim(context: &'static str, expected: usize, got: usize) -> Self {
        Error::DimMismatch {
            context,
            expected,
            got,
        }
    }
}

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Every failure the core can report. No variant carries IO state; the std
/// companion wraps these in its own error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Shapes that cannot be combined by the named operation.
    Dimension { op: &'static str, detail: String },
    /// A scalar argument outside its legal range (negative scale, zero stride, ...).
    Parameter { op: &'static str, detail: String },
    /// Model wiring that violates a structural contract (route count, head layout).
    Structure(String),
    /// Gradient audit could not run (non-finite loss, wrong precision).
    Audit(String),
    /// The op counter met something it cannot count statically.
    Unsupported(String),
    /// An input that breaks a documented precondition, e.g. unnormalized probabilities.
    Contract(String),
    /// Checkpoint tensors that do not fit the target model.
    Transfer { mismatched: Vec<String> },
    /// Training produced a non-finite loss.
    Divergence { phase: &'static str, epoch: usize, loss: f64 },
    /// Data that cannot support the requested fit (single class, empty set).
    DegenerateData(String),
    /// Checkpoint payload that does not decode.
    Checkpoint(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "{op}: dimension error: {detail}"),
            Error::Parameter { op, detail } => write!(f, "{op}: invalid parameter: {detail}"),
            Error::Structure(d) => write!(f, "structure error: {d}"),
            Error::Audit(d) => write!(f, "gradient audit error: {d}"),
            Error::Unsupported(d) => write!(f, "unsupported: {d}"),
            Error::Contract(d) => write!(f, "contract violation: {d}"),
            Error::Transfer { mismatched } => {
                write!(f, "weight transfer failed for: {}", mismatched.join(", "))
            }
            Error::Divergence { phase, epoch, loss } => {
                write!(f, "{phase} diverged at epoch {epoch} (loss = {loss})")
            }
            Error::DegenerateData(d) => write!(f, "degenerate data: {d}"),
            Error::Checkpoint(d) => write!(f, "checkpoint error: {d}"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Dimension { op, detail: detail.into() })
}

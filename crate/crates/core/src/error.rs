use alloc::string::String;

/// Errors produced by the embedding engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not line up.
    Shape(String),
    /// A value that must be finite was NaN or infinite.
    NonFinite(String),
    /// An argument violated a documented precondition.
    InvalidArgument(String),
    /// The named modality does not exist in the world.
    UnknownModality(String),
    /// Class means could not be made separable.
    Separability(String),
    /// Training produced a non-finite loss.
    Divergence { step: u64, pair: String },
    /// A class had no examples where at least one was required.
    MissingClass(usize),
}

impl core::fmt::Display for Error {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape mismatch: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite value: {msg}"),
            Error::InvalidArgument(msg) => write!(f, "invalid argument: {msg}"),
            Error::UnknownModality(name) => write!(f, "unknown modality `{name}`"),
            Error::Separability(msg) => write!(f, "class means not separable: {msg}"),
            Error::Divergence { step, pair } => {
                write!(f, "training diverged at step {step} on pair `{pair}`")
            }
            Error::MissingClass(c) => write!(f, "class {c} has no examples"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T, E = Error> = core::result::Result<T, E>;

use alloc::string::String;
use core::fmt;

/// Crate-wide error type.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not agree for the attempted operation.
    ShapeMismatch(String),
    /// Channel count of an input does not match the operator's parameters.
    ChannelMismatch(String),
    /// Backward was requested on a tensor that is not a scalar.
    NonScalarRoot(usize),
    /// A NaN or infinity was encountered where finite values are required.
    NumericFailure(String),
    /// A mask contained values other than 0 and 1.
    NonBinaryMask,
    /// A configuration value violates its documented constraints.
    InvalidConfig(String),
    /// The hole generator could not land in the requested coverage band.
    CoverageUnreachable { lo: f64, hi: f64, attempts: usize },
    /// An operation that requires at least one element received none.
    Empty(String),
    /// Requested spatial size is not divisible as required (pyramids, U-Net).
    IndivisibleSize { size: usize, divisor: usize },
    /// Wilcoxon signed-rank test with all differences zero is undefined.
    AllDifferencesZero,
    /// A tumor blob could not be placed inside the organ-of-interest mask.
    BlobOutsideOoi,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Error::ChannelMismatch(msg) => write!(f, "channel mismatch: {msg}"),
            Error::NonScalarRoot(n) => {
                write!(f, "backward root must be a scalar, got {n} elements")
            }
            Error::NumericFailure(msg) => write!(f, "numeric failure: {msg}"),
            Error::NonBinaryMask => write!(f, "mask contains values other than 0 and 1"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::CoverageUnreachable { lo, hi, attempts } => write!(
                f,
                "hole coverage in [{lo}, {hi}] unreachable after {attempts} attempts"
            ),
            Error::Empty(what) => write!(f, "empty input: {what}"),
            Error::IndivisibleSize { size, divisor } => {
                write!(f, "size {size} not divisible by {divisor}")
            }
            Error::AllDifferencesZero => {
                write!(f, "signed-rank test undefined: all differences are zero")
            }
            Error::BlobOutsideOoi => write!(f, "tumor blob does not fit inside the OOI mask"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

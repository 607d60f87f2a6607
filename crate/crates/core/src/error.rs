use alloc::string::String;

/// Error type shared by every module in the crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// An argument violated a documented precondition.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    /// A math operation left its domain (log of a non-positive value, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// A NaN or infinity surfaced where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// The computation tape was used out of protocol.
    #[error("tape error: {0}")]
    Tape(String),
    /// A label matrix violated the contract of the requested operation.
    #[error("label error: {0}")]
    Label(String),
    /// A sample set that must be non-empty was empty.
    #[error("empty set: {0}")]
    EmptySet(String),
}

pub type Result<T> = core::result::Result<T, Error>;

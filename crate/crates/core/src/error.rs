use thiserror::Error;

/// Error taxonomy shared across the engine. Variants map onto process exit
/// codes at the CLI boundary: Config/Io -> 2, Format -> 3, Shape/Contract -> 4.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration (unknown key, bad value, missing
    /// file path, incompatible checkpoint for the requested run).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed external data: bad IDX/CIFAR/checkpoint bytes.
    #[error("format error: {0}")]
    Format(String),

    /// Tensor shape disagreement between operands.
    #[error("shape error: {0}")]
    Shape(String),

    /// Broken internal invariant (misuse of a stateful API, non-scalar loss,
    /// out-of-order statistics update). These indicate bugs, not bad input.
    #[error("contract error: {0}")]
    Contract(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) => 2,
            Error::Format(_) => 3,
            Error::Shape(_) | Error::Contract(_) => 4,
        }
    }
}

//! Error type shared across the crate.
//!
//! Everything that can fail returns [`Error`]; panics are reserved for
//! internal invariant violations (indexing bugs, poisoned math) that no
//! caller can meaningfully handle.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown key, unparsable value, out-of-range setting.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric input was NaN or infinite where a finite value is required.
    #[error("non-finite input: {0}")]
    NumericInput(String),

    /// An action vector had the wrong arity or an out-of-domain entry.
    #[error("bad action: {0}")]
    Action(String),

    /// A dynamics step was asked to integrate outside its valid regime.
    #[error("step error: {0}")]
    Step(String),

    /// A tensor/buffer shape did not match what the operation expects.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An operation was called in a state that does not admit it
    /// (stepping a finished episode, resuming into a mismatched setup).
    #[error("lifecycle error: {0}")]
    Lifecycle(String),

    /// A rollout/minibatch was empty or internally inconsistent.
    #[error("bad batch: {0}")]
    Batch(String),

    /// Checkpoint file is corrupt, truncated, or from an incompatible layout.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Command-line usage error (reserved exit code 2).
    #[error("usage: {0}")]
    Usage(String),

    /// An I/O failure tied to a specific file, with the path in the message.
    #[error("file error: {0}")]
    File(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: usage errors get 2, everything else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            _ => 1,
        }
    }
}

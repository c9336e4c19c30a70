//! Error taxonomy shared by every module.
//!
//! The variants map onto the process exit codes used by the `glab` binary:
//! configuration problems (bad files, bad flags, unknown keys) exit 2,
//! IO failures exit 4, and everything that goes wrong after a run has been
//! validly configured — parameter misuse, degenerate steps, violated
//! invariants — exits 3.

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A function argument is outside its documented domain.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// An index (timestep, grid position, component) is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A quantity that must be invertible or nonzero is not.
    #[error("singular value: {0}")]
    Singularity(String),

    /// A solver or equivalence step degenerated; carries the step position.
    #[error("degenerate step at grid position {index}: {message}")]
    DegenerateStep { index: usize, message: String },

    /// Configuration text could not be parsed or contains invalid keys.
    #[error("config error: {0}")]
    Config(String),

    /// A hard invariant failed at run time.
    #[error("invariant violation: {0}")]
    Invariant(String),

    /// Filesystem failure while emitting artifacts.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 config, 3 invariant/runtime, 4 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io(_) => 4,
            _ => 3,
        }
    }
}

//! Error taxonomy shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
///
/// The CLI maps these onto process exit codes: `Numeric` and `Determinism`
/// exit with 2, everything else with 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Incompatible tensor or grid shapes; the message names both sides.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values or a failed numeric tolerance.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration or parameter value.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called before its required state existed.
    #[error("state error: {0}")]
    State(String),

    /// A function handed to the gradient checker returned different values
    /// on identical inputs.
    #[error("determinism error: {0}")]
    Determinism(String),

    /// Malformed text input; carries the 1-based line number.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Event timestamps out of order.
    #[error("ordering error: {0}")]
    Ordering(String),

    /// A value outside its domain (e.g. a spike tensor with fractional entries).
    #[error("domain error: {0}")]
    Domain(String),

    /// Energy report construction hit a block with no recorded firing rate.
    #[error("reporting error: {0}")]
    Report(String),

    /// Checkpoint magic/version/config did not match expectations.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

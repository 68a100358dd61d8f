//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller-supplied value violates a documented precondition.
    #[error("invalid input: {0}")]
    Input(String),

    /// The grid cannot resolve the requested quantity. `min_time` carries the
    /// smallest admissible time when the gate is a time-resolution gate.
    #[error("resolution: {message}")]
    Resolution {
        message: String,
        min_time: Option<f64>,
    },

    /// A smallness condition required by the construction fails.
    #[error("smallness violated: {0}")]
    Smallness(String),

    /// A certificate could not be produced (contraction constant too large,
    /// infeasible envelope, ...). The payload names the violated inequality.
    #[error("no certificate: {0}")]
    NoCertificate(String),

    /// An iterative numerical procedure failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Experiment configuration errors (parse errors, unknown keys,
    /// inconsistent stage requests).
    #[error("configuration: {0}")]
    Config(String),

    /// Malformed field or kernel-table container.
    #[error("container format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn resolution(msg: impl Into<String>, min_time: Option<f64>) -> Self {
        Error::Resolution {
            message: msg.into(),
            min_time,
        }
    }
}

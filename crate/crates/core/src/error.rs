use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid policy spec: {0}")]
    InvalidSpec(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: usize, vocab_size: usize },

    #[error("context {context} out of range ({num_contexts} contexts)")]
    ContextOutOfRange { context: usize, num_contexts: usize },

    #[error("policy spec mismatch between current and old parameters")]
    SpecMismatch,

    #[error("group needs at least 2 samples, got {0}")]
    GroupTooSmall(usize),

    #[error("advantage table was built with scheme {found:?}, variant needs {expected:?}")]
    SchemeMismatch {
        expected: crate::advantage::Scheme,
        found: crate::advantage::Scheme,
    },

    #[error("rollout {0} is already relegated")]
    AlreadyRelegated(crate::rollout::RolloutUid),

    #[error("state space too large for enumeration: {0} sequences (limit 1e6)")]
    StateSpaceTooLarge(u128),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("config error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 config, 2 runtime invariant, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::ConfigParse { .. } | Error::Config(_) => 1,
            Error::Io { .. } => 3,
            _ => 2,
        }
    }
}

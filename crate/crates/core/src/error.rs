use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A numeric argument outside the physical domain of a formula.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("trace error: {0}")]
    Trace(String),

    /// A mitigation transition requested in a state that does not allow it.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("engine is halted")]
    Halted,

    /// Simulator state broke one of its structural invariants (exclusivity,
    /// buffer bounds, accounting identities). Runs abort instead of reporting.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("report error: {0}")]
    Report(String),

    #[error("cannot write report to {}: {source}", path.display())]
    ReportWrite {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("reports were produced from different traces ({0} vs {1})")]
    TraceMismatch(String, String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Trace(_) => 3,
            Error::Invariant(_) => 4,
            Error::Protocol(_) | Error::Halted => 4,
            Error::Report(_)
            | Error::ReportWrite { .. }
            | Error::TraceMismatch(..)
            | Error::Io { .. } => 1,
        }
    }
}

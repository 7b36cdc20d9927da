use thiserror::Error;

/// Errors produced anywhere in the engine, the harness or the trace codec.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid engine state: {0}")]
    State(String),
    #[error("trace format error: {0}")]
    Format(String),
    #[error("trace corrupted: expected {expected} bytes, found {actual}")]
    Corruption { expected: u64, actual: u64 },
    #[error("unsupported trace version {0}")]
    Version(u32),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors raised while decoding a KVTR trace.
    pub fn is_trace_error(&self) -> bool {
        matches!(
            self,
            Error::Format(_) | Error::Corruption { .. } | Error::Version(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

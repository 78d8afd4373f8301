use thiserror::Error;

use crate::net::PartyId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("value {0} outside the fixed-point range")]
    Range(f64),
    #[error("{kind} triple pool exhausted: requested {requested}, available {available}")]
    TripleExhausted {
        kind: &'static str,
        requested: usize,
        available: usize,
    },
    #[error("party {party} message {index}: {reason}")]
    Session { party: PartyId, index: u64, reason: String },
    #[error("timed out waiting for a message from {from} at {at}")]
    Deadlock { from: PartyId, at: PartyId },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("format error at {path}:{line}: {reason}")]
    Format { path: String, line: usize, reason: String },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
    #[error("oracle domain error: {0}")]
    Domain(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(path: impl Into<String>, line: usize, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            reason: reason.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid service descriptor: {0}")]
    InvalidDescriptor(String),
    #[error("service `{0}` is not registered")]
    NotRegistered(String),
    #[error("invalid pattern `{pattern}`: {reason}")]
    InvalidPattern { pattern: String, reason: String },
    #[error("invalid predicate: {0}")]
    InvalidPredicate(String),
    #[error("unknown collector module `{0}`")]
    UnknownModule(String),
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("unknown task {0}")]
    UnknownTask(u64),
    #[error("invalid retention policy: {0}")]
    InvalidRetention(String),
    #[error("width {requested} ms is not a multiple of the stored width; valid widths are multiples of {base} ms (e.g. {examples:?})")]
    InvalidWidth {
        requested: u64,
        base: u64,
        examples: Vec<u64>,
    },
    #[error("invalid time range: t1 {t1} > t2 {t2}")]
    InvalidRange { t1: u64, t2: u64 },
    #[error("signature verification failed for `{0}`")]
    BadSignature(String),
    #[error("invalid filter: {0}")]
    InvalidFilter(String),
    #[error("unknown filter `{0}`")]
    UnknownFilter(String),
    #[error("malformed probe datagram: {0}")]
    MalformedPacket(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Storage(err.to_string())
    }
}

use thiserror::Error;

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("connection closed by peer")]
    Closed,
    #[error("unexpected {got} frame, wanted {wanted}")]
    Unexpected { got: &'static str, wanted: &'static str },
    #[error("remote error {code}: {msg}")]
    Remote { code: String, msg: String },
    #[error("no endpoint reachable: {0}")]
    Unreachable(String),
    #[error(transparent)]
    Core(#[from] vigil_core::Error),
    #[error("config: {0}")]
    Config(String),
}

impl NetError {
    /// The remote error code, when the peer answered with an ERROR frame.
    pub fn code(&self) -> Option<&str> {
        match self {
            NetError::Remote { code, .. } => Some(code),
            _ => None,
        }
    }
}

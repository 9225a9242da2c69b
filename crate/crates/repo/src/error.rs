use thiserror::Error;

pub type Result<T, E = RepoError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum RepoError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] vigil_core::Error),
    #[error(transparent)]
    Net(#[from] vigil_net::NetError),
    #[error("config: {0}")]
    Config(String),
}

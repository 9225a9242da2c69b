use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("invalid scenario: {}", .0.join("; "))]
    Invalid(Vec<String>),
    #[error(transparent)]
    Core(#[from] vigil_core::Error),
    #[error(transparent)]
    Net(#[from] vigil_net::NetError),
    #[error(transparent)]
    Repo(#[from] vigil_repo::RepoError),
}

pub type Result<T> = std::result::Result<T, SimError>;

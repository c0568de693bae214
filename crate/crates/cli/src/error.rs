use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] flowstrike::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing artifact {0}; run the earlier command first")]
    Missing(String),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

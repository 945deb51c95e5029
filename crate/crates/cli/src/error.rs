use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{0}")]
    Usage(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] bolddecode::Error),
    #[error("{failed} self-test check(s) failed")]
    SelfTest { failed: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            // core config errors are config errors too
            CliError::Core(bolddecode::Error::Config { .. }) => 2,
            _ => 1,
        }
    }
}

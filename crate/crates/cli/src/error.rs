use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] grk_core::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("failed checks: {}", .0.join(", "))]
    CheckFailed(Vec<String>),

    #[error("training failed for {estimator} (seed {seed}): {source}")]
    Train {
        estimator: String,
        seed: u64,
        #[source]
        source: grk_core::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

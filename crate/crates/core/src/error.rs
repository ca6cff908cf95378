use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("gradient check failed: {0}")]
    GradientCheck(String),

    #[error("enumeration needs {outcomes} joint outcomes, limit is {limit}")]
    Capacity { outcomes: u128, limit: u128 },

    #[error("non-finite estimate at replicate {replicate} (seed {seed}, stream {stream})")]
    PoisonedRun { seed: u64, stream: u64, replicate: u64 },

    #[error("degenerate point: A(p) denominator vanishes at ({i}, {j})")]
    DegeneratePoint { i: usize, j: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: non-finite logits")]
    Divergence { iteration: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

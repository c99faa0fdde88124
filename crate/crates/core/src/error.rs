use thiserror::Error;

/// Errors from digit-string arithmetic and problem construction.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArithError {
    #[error("not a digit string: {0:?}")]
    NotDigits(String),
    #[error("empty digit string")]
    Empty,
    #[error("leading zero in multi-digit operand {0:?}")]
    LeadingZero(String),
    #[error("operands have different lengths ({a} vs {b})")]
    LengthMismatch { a: usize, b: usize },
    #[error("cannot decompose a 1-digit problem; answer it directly")]
    DecomposeLengthOne,
    #[error("population {population} for length {length} exceeds enumeration budget {budget}; sample instead")]
    SampleInstead {
        length: usize,
        population: u128,
        budget: u64,
    },
}

/// Errors from the trainable learner.
#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("prompt of {prompt_tokens} tokens plus {requested} new tokens exceeds max sequence length {max_seq_len}")]
    PromptTooLong {
        prompt_tokens: usize,
        requested: usize,
        max_seq_len: usize,
    },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("training example of {tokens} tokens exceeds max sequence length {max_seq_len}")]
    ExampleTooLong { tokens: usize, max_seq_len: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Errors from run configuration and the run harness.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Arith(#[from] ArithError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Other(String),
}

impl RunError {
    /// True when the error is a configuration/validation problem rather than a
    /// runtime failure. The CLI maps this to exit code 1 vs 2.
    pub fn is_validation(&self) -> bool {
        matches!(self, RunError::Config(_))
    }
}

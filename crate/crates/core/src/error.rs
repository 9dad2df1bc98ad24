use thiserror::Error;

use crate::prompts::PromptError;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by the command line to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("index {index} out of range 1..={max}")]
    Index { index: usize, max: usize },
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Vocabulary { id: usize, vocab: usize },
    #[error("prompt has {len} tokens, limit is {limit}")]
    PromptTooLong { len: usize, limit: usize },
    #[error("waveform has {samples} samples, need at least {frames}")]
    InsufficientSamples { samples: usize, frames: usize },
    #[error("attention row {row} has no allowed keys")]
    DegenerateMask { row: usize },
    #[error("non-finite activations after block {block}")]
    NumericInstability { block: usize },
    #[error("non-finite loss at batch element {index} (t = {t})")]
    NonFiniteLoss { index: usize, t: f64 },
    #[error("non-finite state at sampler step {step}")]
    SamplerDiverged { step: usize },
    #[error("trace has zero variance: {0}")]
    DegenerateTrace(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("checksum mismatch in record {record}: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum {
        record: usize,
        stored: u32,
        computed: u32,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Dimension(_)
            | Error::Shape(_)
            | Error::Parameter(_)
            | Error::Index { .. }
            | Error::Vocabulary { .. }
            | Error::PromptTooLong { .. }
            | Error::DegenerateMask { .. }
            | Error::Json(_) => ErrorClass::Config,
            Error::Evaluation(_)
            | Error::NumericInstability { .. }
            | Error::NonFiniteLoss { .. }
            | Error::SamplerDiverged { .. }
            | Error::DegenerateTrace(_) => ErrorClass::Numeric,
            Error::InsufficientSamples { .. }
            | Error::Format(_)
            | Error::Checksum { .. }
            | Error::Data(_)
            | Error::Prompt(_)
            | Error::Io(_) => ErrorClass::Data,
        }
    }

    /// Short stable identifier printed by the command line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Shape(_) => "shape",
            Error::Parameter(_) => "parameter",
            Error::Index { .. } => "index",
            Error::Evaluation(_) => "evaluation",
            Error::Vocabulary { .. } => "vocabulary",
            Error::PromptTooLong { .. } => "prompt_too_long",
            Error::InsufficientSamples { .. } => "insufficient_samples",
            Error::DegenerateMask { .. } => "degenerate_mask",
            Error::NumericInstability { .. } => "numeric_instability",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::SamplerDiverged { .. } => "sampler_diverged",
            Error::DegenerateTrace(_) => "degenerate_trace",
            Error::Format(_) => "format",
            Error::Checksum { .. } => "checksum",
            Error::Data(_) => "data",
            Error::Prompt(_) => "prompt",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

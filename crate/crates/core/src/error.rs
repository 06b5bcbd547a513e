use std::path::PathBuf;

use crate::mix::SourceType;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfiguration(String),

    #[error("value out of range: {0}")]
    OutOfRange(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("malformed stream at position {position}: {reason}")]
    MalformedStream { position: usize, reason: String },

    #[error("no frames fit: budget {budget} leaves room for no wrapped image after {text_tokens} text tokens")]
    NoFramesFit { budget: usize, text_tokens: usize },

    #[error("sample {index} has {len} tokens, exceeding the {window}-token window")]
    SampleTooLong { index: usize, len: usize, window: usize },

    #[error("sample {index} is empty")]
    EmptySample { index: usize },

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("invalid scheduler state: {0}")]
    InvalidState(String),

    #[error("invalid record: {0}")]
    InvalidRecord(String),

    #[error("invalid conversation: {0}")]
    InvalidConversation(String),

    #[error("invalid manifest entry {id}: {reason}")]
    InvalidEntry { id: String, reason: String },

    #[error("source {0} exhausted before the schedule completed")]
    ExhaustedSource(SourceType),

    #[error("corrupt shard data at byte offset {offset}: {reason}")]
    ChecksumFailure { offset: u64, reason: String },

    #[error("entry {id}: cannot read {path}: {reason}")]
    Payload { id: String, path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

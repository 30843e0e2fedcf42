use std::path::PathBuf;

use thiserror::Error;

use crate::persist::PersistError;
use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("invalid run config: {0}")]
    RunConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sequence needs at least {min} tokens, got {len}")]
    SequenceTooShort { len: usize, min: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("missing tensor {0}")]
    MissingTensor(String),
    #[error("pattern {0:?} matches no tensor")]
    NoMatch(String),
    #[error("lora rank {rank} must be below min(d, k) = {limit} for {name}")]
    RankTooLarge {
        name: String,
        rank: usize,
        limit: usize,
    },
    #[error("adapters were already merged")]
    AlreadyMerged,
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("vocabulary mismatch: data has {data}, model expects {model}")]
    VocabMismatch { data: usize, model: usize },
    #[error("no degradation to recover: E_S == E_T == {0}")]
    NoDegradation(f64),
    #[error("fingerprint mismatch for {what}: expected {expected}, found {actual}")]
    FingerprintMismatch {
        what: String,
        expected: String,
        actual: String,
    },
    #[error("missing artifact {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

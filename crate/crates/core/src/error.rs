use thiserror::Error;

use crate::corpus::CorpusError;
use crate::scope::ScopeError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Scope(#[from] ScopeError),
    #[error("unknown constituent label {0:?}")]
    UnknownLabel(String),
    #[error("target {index} has an empty span")]
    EmptyTarget { index: usize },
    #[error("sentence has no tokens")]
    EmptySentence,
    #[error("word {word} has no allowed constituent")]
    UnmaskedWord { word: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("gold tag sequence has length {gold} but the sentence has {len} tokens")]
    GoldLength { gold: usize, len: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

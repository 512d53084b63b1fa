//! Contrastive video-language pre-training at desk scale.
//!
//! A query network (multimodal transformer encoder-decoder) is trained on
//! seven self-supervised proxy tasks. A momentum-updated key network encodes
//! the unaugmented inputs and feeds three memory queues of contrastive
//! negatives. Downstream harnesses cover cross-modal retrieval,
//! classification, caption generation and embedding export.
//!
//! Modules, bottom-up:
//! - [`numerics`]: `f64` tensors, reverse-mode tape, gradient check, Adam
//! - [`model`]: embedders, encoder, decoder, task heads
//! - [`augment`]: seeded masking and shuffling with supervision labels
//! - [`objectives`]: InfoNCE and the proxy-task losses
//! - [`momentum`]: key-network tracking and memory queues
//! - [`pipeline`]: configuration, data files, checkpoints, training loop
//! - [`downstream`]: fine-tuning, retrieval/caption metrics, export

pub mod augment;
pub mod downstream;
pub mod model;
pub mod momentum;
pub mod numerics;
pub mod objectives;
pub mod pipeline;

use std::path::PathBuf;

use thiserror::Error;

pub use numerics::NumericsError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("configuration mismatch in `{field}`: expected {expected}, found {found}")]
    ConfigMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid label: {0}")]
    Label(String),
    #[error("{0}")]
    Queue(String),
    #[error("non-finite {task} loss")]
    NonFiniteLoss { task: &'static str },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }
}

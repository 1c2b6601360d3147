use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid attribute: {msg}")]
    InvalidAttr { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("tape is frozen after backward; call reset() before recording again")]
    TapeFrozen,
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("placement failed after {attempts} attempts for nucleus {index}")]
    PlacementFailure { index: usize, attempts: usize },
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint does not match the model:\n{0}")]
    CheckpointMismatch(String),
    #[error("non-finite loss at step {step} (lr {lr:e}): fine={fine} cgrl={cgrl} coarse={coarse}")]
    NanLoss {
        step: usize,
        lr: f64,
        fine: f64,
        cgrl: f64,
        coarse: f64,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn attr(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidAttr {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

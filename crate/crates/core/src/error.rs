use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        axis: String,
        expected: usize,
        found: usize,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("layer `{layer}`: {msg}")]
    InvalidLayer { layer: String, msg: String },

    #[error("backward called before forward")]
    BackwardBeforeForward,

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("no hand found: frame has no valid depth")]
    NoHand,

    #[error("cube projects outside the image")]
    CubeOutsideImage,

    #[error("pose frame mismatch: expected {expected} coordinates")]
    FrameMismatch { expected: &'static str },

    #[error("frame `{frame_id}`: {msg}")]
    Record { frame_id: String, msg: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, axis: impl Into<String>, expected: usize, found: usize) -> Self {
        Error::ShapeMismatch {
            op,
            axis: axis.into(),
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

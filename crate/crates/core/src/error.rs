use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI header: field `{field}`: {reason}")]
    Format { field: &'static str, reason: String },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedType(i16),

    #[error("volume has {0} non-unit dimensions; only single 3D frames are supported")]
    Dimensionality(usize),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("VGG11 transfer failed at {layer}: expected {expected:?}, found {found:?}")]
    Transfer {
        layer: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("training diverged at epoch {epoch} (loss is {loss})")]
    Divergence { epoch: usize, loss: f32 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("invalid shape {0:?}: expected 1 to 3 positive dimensions")]
    InvalidShape(Vec<usize>),

    #[error("tensor of shape {shape} needs {expected} values, got {got}")]
    LengthMismatch {
        shape: Shape,
        expected: usize,
        got: usize,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("backward needs a scalar loss, got shape {0}")]
    NotScalar(Shape),

    #[error("non-finite gradient in parameter block `{0}`")]
    NonFiniteGradient(String),

    #[error("{layer}: {source}")]
    Layer {
        layer: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("corpus `{0}` has no records")]
    EmptyCorpus(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { expected: u8, found: u8 },

    #[error("checkpoint block `{name}` has shape {found}, expected {expected}")]
    CheckpointShape {
        name: String,
        expected: Shape,
        found: Shape,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn in_layer(self, layer: &'static str) -> Error {
        Error::Layer {
            layer,
            source: Box::new(self),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) trait LayerContext<T> {
    fn layer(self, layer: &'static str) -> Result<T>;
}

impl<T> LayerContext<T> for Result<T> {
    fn layer(self, layer: &'static str) -> Result<T> {
        self.map_err(|e| e.in_layer(layer))
    }
}

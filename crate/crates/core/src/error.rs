use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: {left} vs {right}")]
    Shape {
        context: String,
        left: String,
        right: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("row {row} of the projection matrix has (near) zero norm")]
    ZeroNormRow { row: usize },

    #[error("label {label} out of range [0, {classes}) at record {record}")]
    LabelOutOfRange {
        record: usize,
        label: usize,
        classes: usize,
    },

    #[error("layer {index} ({kind}): {message}")]
    Config {
        index: usize,
        kind: String,
        message: String,
    },

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("unknown architecture `{0}`")]
    UnknownArchitecture(String),

    #[error("missing forward cache for layer {0}")]
    MissingCache(usize),

    #[error("{}: expected {expected} bytes, found {actual}", path.display())]
    FileSize {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{}: record {record} has label {label}, maximum is {max}", path.display())]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: u8,
        max: u8,
    },

    #[error("checkpoint: bad magic bytes")]
    BadMagic,

    #[error("checkpoint: unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: truncated while reading {0}")]
    Truncated(&'static str),

    #[error("checkpoint: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },

    #[error("checkpoint: {0}")]
    CheckpointContent(String),

    #[error("class count mismatch: network has {network}, dataset has {dataset}")]
    ClassMismatch { network: usize, dataset: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(
        context: impl Into<String>,
        left: impl Into<String>,
        right: impl Into<String>,
    ) -> Self {
        Error::Shape {
            context: context.into(),
            left: left.into(),
            right: right.into(),
        }
    }
}

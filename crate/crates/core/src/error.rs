use std::path::PathBuf;

use thiserror::Error;

/// Everything that can go wrong in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("odd channel count {channels} at {at}")]
    OddChannels { at: String, channels: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("repeat count must be at least 1")]
    ZeroRepeat,

    #[error("topology mismatch: expected {expected}, found {found}")]
    TopologyMismatch { expected: String, found: String },

    #[error("incomplete frame: received {received} of {expected} rows")]
    IncompleteFrame { received: usize, expected: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("unquantizable state: {0}")]
    Unquantizable(String),

    #[error("accumulator overflow in layer {layer}")]
    AccumulatorOverflow { layer: String },

    #[error("input exponent {found} does not match the graph input exponent {expected}")]
    ExponentMismatch { expected: i32, found: i32 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate cost model: {0}")]
    DegenerateCost(String),

    #[error("not a bundle")]
    NotABundle,

    #[error("corrupt section {0}")]
    CorruptSection(String),

    #[error("unsupported version {found} (supported up to {supported})")]
    UnsupportedVersion { found: u16, supported: u16 },

    #[error("bundle has no {0} section")]
    MissingSection(String),

    #[error("malformed {what}: {detail}")]
    Malformed { what: String, detail: String },

    #[error("unexpected end of file")]
    UnexpectedEof,

    #[error("bad IDX magic {found:#010x} in {path}, expected {expected:#010x}")]
    IdxMagic { path: PathBuf, found: u32, expected: u32 },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the CLI: 3 for bad data, 4 for contract
    /// violations, 2 for argument problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 2,
            Error::TopologyMismatch { .. }
            | Error::InvalidSpec(_)
            | Error::OddChannels { .. }
            | Error::ShapeMismatch(_)
            | Error::ZeroRepeat
            | Error::ExponentMismatch { .. }
            | Error::AccumulatorOverflow { .. }
            | Error::DegenerateCost(_) => 4,
            _ => 3,
        }
    }

    pub(crate) fn malformed(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Malformed {
            what: what.into(),
            detail: detail.into(),
        }
    }
}

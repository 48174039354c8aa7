use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the library.
///
/// `is_validation` separates caller mistakes (bad shapes, bad configuration,
/// malformed files) from failures that happen while computing.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument had the wrong shape, range or content.
    #[error("rejected input: {0}")]
    Input(String),

    /// A configuration (layer geometry, preset, pipeline) is inconsistent.
    #[error("rejected configuration: {0}")]
    Config(String),

    /// A computation produced NaN or infinity.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("manifest schema: missing column `{0}`")]
    MissingColumn(String),

    #[error("manifest row {row}: {message}")]
    ManifestRow { row: usize, message: String },

    #[error("duplicate manifest row {row} (same as row {first})")]
    DuplicateRow { row: usize, first: usize },

    #[error("cannot read image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("labels missing from the label map: {0:?}")]
    UnmappedLabels(Vec<String>),

    #[error("checkpoint spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("stage {stage}: {message}")]
    Stage { stage: usize, message: String },

    #[error("database `{0}` has no samples in the manifest")]
    MissingDatabase(String),

    #[error("fold `{0}` has no predictions")]
    MissingFold(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by invalid inputs or configuration, as opposed
    /// to I/O or numerical failures during a run.
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::NonFinite(_) | Error::Io(_))
    }
}

use std::path::PathBuf;

use crate::dataset::RegionId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("region {0:?} is outside the dataset grid")]
    RegionOutOfRange(RegionId),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("class id {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: u8, num_classes: usize },

    #[error("{0}")]
    EmptyInput(&'static str),

    #[error("not enough unlabeled regions: need {needed}, have {available}")]
    InsufficientRegions { needed: usize, available: usize },

    #[error("degenerate BALD configuration: {0}")]
    DegenerateBald(&'static str),

    #[error("non-terminal transition has an empty next pool")]
    MissingNextPool,

    #[error("replay buffer holds {have} transitions, batch needs {need}")]
    ReplayUnderfilled { have: usize, need: usize },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("field `{field}` mismatch: header says {expected}, found {found}")]
    FieldMismatch {
        field: &'static str,
        expected: String,
        found: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("plot rendering failed: {0}")]
    Plot(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty histogram")]
    EmptyHistogram,
    #[error("no tissue patches")]
    NoTissuePatches,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("trailing bytes: {0} unexpected bytes after payload")]
    TrailingBytes(usize),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("empty bag")]
    EmptyBag,
    #[error("undefined AUROC: scores need at least one positive and one negative")]
    UndefinedAuroc,
    #[error("class {0} has no samples")]
    MissingClass(usize),
    #[error("duplicate point {0}: zero distance to every other point")]
    DegeneratePoint(usize),
    #[error("member {member}: {source}")]
    Member {
        member: String,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn member(member: impl Into<String>, source: Error) -> Self {
        Error::Member { member: member.into(), source: Box::new(source) }
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>, source: Error) -> Self {
        Error::File { path: path.into(), source: Box::new(source) }
    }

    /// The innermost error, skipping member/path context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Member { source, .. } | Error::File { source, .. } => source.root(),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("split overlap: class {0} is declared both seen and unseen")]
    SplitOverlap(i64),

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed export: {0}")]
    Export(String),

    #[error("synthetic generation failed: {0}")]
    Synthesis(String),

    #[error("label {0} is not a seen class")]
    LabelNotSeen(usize),

    #[error("empty candidate set")]
    EmptyCandidates,

    #[error("empty split: {0}")]
    EmptySplit(&'static str),

    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;

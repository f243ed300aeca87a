use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants are coarse on purpose: the CLI maps them onto distinct exit
/// codes (config, data, stage) and each carries a human-readable message.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("placement error: {0}")]
    Placement(String),
    #[error("degenerate histogram: {0}")]
    DegenerateHistogram(String),
    #[error("missing precondition: stage `{stage}` has no outputs at {path}")]
    MissingStage { stage: String, path: PathBuf },
    #[error("object {object}: {source}")]
    Object {
        object: u32,
        #[source]
        source: Box<Error>,
    },
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("toml error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn for_object(self, object: u32) -> Self {
        Error::Object {
            object,
            source: Box::new(self),
        }
    }

    /// Broad category used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Param(_) | Error::Config(_) | Error::Toml(_) => ErrorKind::Config,
            Error::Data(_)
            | Error::Placement(_)
            | Error::DegenerateHistogram(_)
            | Error::Json(_)
            | Error::Csv(_)
            | Error::Image(_) => ErrorKind::Data,
            Error::Object { source, .. } => source.kind(),
            Error::MissingStage { .. } | Error::Io { .. } => ErrorKind::Stage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Stage,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Stage => 4,
        }
    }
}

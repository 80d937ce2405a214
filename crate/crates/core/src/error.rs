use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("missing annotation: {0}")]
    MissingAnnotation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot decode image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed manifest {path} line {line}: {message}")]
    Manifest {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("training diverged at stage {stage}, iteration {iteration}: {loss} is not finite")]
    TrainingDiverged {
        stage: String,
        iteration: u64,
        loss: String,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used for CLI messages and exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Ingestion(_) => "ingestion",
            Error::MissingAnnotation(_) => "missing-annotation",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Manifest { .. } => "manifest",
            Error::InvalidSplit(_) => "invalid-split",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::InsufficientData(_) => "insufficient-data",
            Error::TrainingDiverged { .. } => "training-diverged",
            Error::Shape(_) => "shape",
            Error::Numeric(_) => "numeric",
            Error::Config(_) => "config",
            Error::Dependency(_) => "dependency",
            Error::Checkpoint(_) => "checkpoint",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Dependency(_) => 3,
            Error::Ingestion(_) | Error::MissingAnnotation(_) | Error::Manifest { .. } => 4,
            Error::Io { .. } | Error::Image { .. } => 5,
            Error::InvalidSplit(_) | Error::InvalidArgument(_) | Error::Shape(_) => 6,
            Error::InsufficientData(_) => 7,
            Error::TrainingDiverged { .. } | Error::Numeric(_) => 8,
            Error::Checkpoint(_) | Error::Tensor(_) | Error::Json(_) => 9,
        }
    }
}

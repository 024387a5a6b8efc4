use std::path::PathBuf;

/// Crate-wide error type. The CLI maps variants onto exit codes: config
/// problems exit 2, missing artifacts exit 3, failed acceptance checks
/// exit 4, everything else exits 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("weights file error: {0}")]
    WeightsFormat(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("missing attention cache for timestep {t}")]
    MissingCache { t: usize },

    #[error("{stage} diverged at iteration {iter}: loss = {loss}")]
    Diverged {
        stage: &'static str,
        iter: usize,
        loss: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("png error: {0}")]
    Png(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::MissingArtifact(_) | Error::Io(_) => 3,
            _ => 1,
        }
    }
}

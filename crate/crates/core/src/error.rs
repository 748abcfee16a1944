//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/shape mismatch between an input and what an operation expects.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// Requested decomposition rank exceeds what the data supports.
    #[error("rank error: requested {requested}, achievable rank is {achievable}")]
    Rank { requested: usize, achievable: usize },

    /// Malformed or out-of-contract input data.
    #[error("input error: {0}")]
    Input(String),

    /// Audio/video length disagreement beyond tolerance.
    #[error("alignment error: audio covers {audio_frames:.3} frames, video has {video_frames} frames")]
    Alignment {
        audio_frames: f64,
        video_frames: usize,
    },

    /// Invalid configuration or fingerprint mismatch.
    #[error("config error: {0}")]
    Config(String),

    /// Missing or unreadable dataset content.
    #[error("data error: {0}")]
    Data(String),

    /// NaN/Inf losses, non-PSD matrices, divergence.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Operation requires capabilities the bound component does not provide
    /// (e.g. synthesis through a weight-loading adapter stub).
    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// Process exit code contract: 0 success, 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Unsupported(_) => 2,
            Error::Dimension(_)
            | Error::Input(_)
            | Error::Alignment { .. }
            | Error::Data(_)
            | Error::Io(_) => 3,
            Error::Rank { .. } | Error::Numerical(_) => 4,
        }
    }

    /// Stable machine-readable kind tag for error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Rank { .. } => "rank",
            Error::Input(_) => "input",
            Error::Alignment { .. } => "alignment",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Numerical(_) => "numerical",
            Error::Unsupported(_) => "unsupported",
            Error::Io(_) => "io",
        }
    }
}

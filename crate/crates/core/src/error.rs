//! Error type shared by every module in the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An embedding batch contained NaN or infinite entries.
    #[error("non-finite embedding")]
    NonFiniteEmbedding,

    /// An embedding row had zero norm where a direction was required.
    #[error("degenerate embedding")]
    DegenerateEmbedding,

    /// Two operands disagreed on shape.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Batch statistics need at least two samples.
    #[error("batch-norm requires batch >= 2")]
    BatchTooSmall,

    /// A training loss stopped being finite.
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },

    /// Covariance matrix eigenvalue below the numerical floor.
    #[error("non-PSD covariance beyond floor (min eigenvalue {min_eig})")]
    NonPsdCovariance { min_eig: f64 },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image {path}: {detail}")]
    Image { path: String, detail: String },
}

impl Error {
    pub fn shape(detail: impl Into<String>) -> Self {
        Error::ShapeMismatch(detail.into())
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid style window {window}: must be odd and at most {max}")]
    InvalidWindow { window: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("spectrum is not Hermitian: imaginary residue {0:e} after inverse transform")]
    NonRealSpectrum(f64),

    #[error("unknown client {0}")]
    UnknownClient(u32),

    #[error("clustering: {0}")]
    Clustering(String),

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("config: {0}")]
    Config(String),

    #[error("format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("signal too short: {0}")]
    TooShort(String),
    #[error("inconsistent STFT config: {0}")]
    InconsistentConfig(String),
    #[error("singular system: {0}")]
    SingularSystem(String),
    #[error("empty mesh")]
    EmptyMesh,
    #[error("landmarks out of frame: {0}")]
    LandmarksOutOfFrame(String),
    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),
    #[error("zero reference signal")]
    ZeroReference,
    #[error("zero signal: {0}")]
    ZeroSignal(String),
    #[error("bad file: {0}")]
    BadFile(String),
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

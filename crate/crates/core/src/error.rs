use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("point is at or behind the camera plane (depth {depth})")]
    BehindCamera { depth: f64 },

    #[error("weight load error: {0}")]
    WeightLoad(String),

    #[error("refinement diverged at step {step}: loss {loss} exceeds 10x the initial {initial}")]
    Divergence { step: usize, loss: f64, initial: f64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

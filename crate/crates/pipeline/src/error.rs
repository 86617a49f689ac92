use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Core(#[from] splatstereo::error::Error),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("frame {frame}, camera {camera:?}: {reason}")]
    FrameImage { frame: usize, camera: String, reason: String },

    #[error("bad request: {0}")]
    Request(String),

    #[error("protocol: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(Box<image::ImageError>),

    #[error(transparent)]
    WebSocket(Box<tungstenite::Error>),
}

impl From<image::ImageError> for PipelineError {
    fn from(e: image::ImageError) -> Self {
        Self::Image(Box::new(e))
    }
}

impl From<tungstenite::Error> for PipelineError {
    fn from(e: tungstenite::Error) -> Self {
        Self::WebSocket(Box::new(e))
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

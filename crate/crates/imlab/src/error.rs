use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("dimension mismatch: {0}")]
    Mismatch(String),
    #[error("numerical breakdown at t={t}: {what}")]
    Breakdown { t: f64, what: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("snapshot format: {0}")]
    Format(String),
    #[error("config rejected:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<ImError>,
    },
}

impl ImError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ImError::Invalid(msg.into())
    }

    pub fn mismatch(msg: impl Into<String>) -> Self {
        ImError::Mismatch(msg.into())
    }

    pub fn at_stage(self, stage: &'static str) -> Self {
        ImError::Stage {
            stage,
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, ImError>;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum IssError {
    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("episode infeasible: class {class} has {available} samples, needs {required}")]
    EpisodeInfeasible { class: String, available: usize, required: usize },
    #[error("training diverged in {phase} at step {step}: {detail}")]
    Diverged { phase: &'static str, step: usize, detail: String },
    #[error("provenance error: {0}")]
    Provenance(String),
    #[error("isolation violated: {0}")]
    Isolation(String),
    #[error("cannot decode image {}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] issnet_nn::NnError),
}

impl IssError {
    /// Errors caused by bad input rather than by a failing computation.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            IssError::NotFound(_)
                | IssError::Validation(_)
                | IssError::Shape(_)
                | IssError::EpisodeInfeasible { .. }
                | IssError::Config(_)
                | IssError::Image { .. }
        )
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IssError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, IssError>;

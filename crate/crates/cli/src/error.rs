use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Validation(String),
    #[error("{stage}: {message}")]
    Backend { stage: &'static str, message: String },
    #[error("{stage} outputs not found: {path} (run `synthqa {stage}` first)")]
    MissingStage { stage: &'static str, path: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl PipelineError {
    /// Process exit code: 1 validation, 2 backend, 3 missing dependency.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) | PipelineError::Io { .. } => 1,
            PipelineError::Backend { .. } => 2,
            PipelineError::MissingStage { .. } => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        PipelineError::Io { path: path.display().to_string(), message: e.to_string() }
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Invalid or missing configuration (exit code 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// The command could not complete (exit code 1).
    #[error("{0}")]
    Failed(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Failed(_) => 1,
        }
    }
}

/// Attaches context to a lower-level error as a run failure.
pub trait Context<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, PipelineError>;
}

impl<T, E: std::fmt::Display> Context<T> for Result<T, E> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T, PipelineError> {
        self.map_err(|e| PipelineError::Failed(format!("{}: {e}", what())))
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("{0} not found")]
    NotFound(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Core(#[from] mvinpaint::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ServiceError {
    /// Errors caused by the request or the input files rather than by a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            ServiceError::Validation(_) | ServiceError::Json(_) => true,
            ServiceError::Core(e) => matches!(
                e,
                mvinpaint::Error::Config(_)
                    | mvinpaint::Error::MissingFiles(_)
                    | mvinpaint::Error::Format { .. }
                    | mvinpaint::Error::Shape(_)
                    | mvinpaint::Error::Domain(_)
            ),
            _ => false,
        }
    }
}

pub type ServiceResult<T> = std::result::Result<T, ServiceError>;

use thiserror::Error;

/// Errors raised by the CRF library.
#[derive(Debug, Error)]
pub enum CrfError {
    /// Shapes or indices that do not agree between model, potentials and labelings.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The exact oracle refuses instances with more than `limit` joint states.
    #[error("instance too large for enumeration: {states} joint states exceeds limit {limit}")]
    TooLarge { states: f64, limit: u64 },

    /// Synthetic scene cannot be laid out at the requested geometry.
    #[error("geometry too small: {0}")]
    Geometry(String),

    #[error("format error in {field}: {message}")]
    Format { field: String, message: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CrfError {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        CrfError::Contract(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        CrfError::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Short machine-readable kind, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            CrfError::Contract(_) => "contract",
            CrfError::TooLarge { .. } => "too-large",
            CrfError::Geometry(_) => "geometry",
            CrfError::Format { .. } => "format",
            CrfError::Config(_) => "config",
            CrfError::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, CrfError>;

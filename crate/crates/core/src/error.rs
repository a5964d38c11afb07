use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("input error: {0}")]
    Input(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },
    #[error("unmatched files between low and normal directories: {0:?}")]
    Unmatched(Vec<String>),
    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },
    #[error("archive format error: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] dr_autograd::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File { path: path.into(), message: message.to_string() }
    }

    /// Whether the failure stems from what the caller supplied (bad input,
    /// bad configuration) rather than from running the computation.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            Error::Input(_)
                | Error::Config(_)
                | Error::Unmatched(_)
                | Error::File { .. }
                | Error::Json(_)
                | Error::Tensor(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

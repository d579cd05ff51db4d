use crate::diffcore::DiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] DiffError),

    #[error("parameter out of domain in `{sampler}`: {msg}")]
    Domain { sampler: &'static str, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid statistics file: {0}")]
    Parse(String),

    #[error("non-finite loss in component `{0}`")]
    NonFiniteLoss(String),

    #[error("non-finite gradient at epoch {0}")]
    NonFiniteGradient(usize),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures caused by the numbers themselves rather than by
    /// the inputs or the environment.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteLoss(_)
                | Error::NonFiniteGradient(_)
                | Error::Diff(DiffError::NonFinite { .. })
                | Error::Domain { .. }
        )
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

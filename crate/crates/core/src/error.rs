use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes that do not fit an operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A call that violates an operation's preconditions (e.g. non-scalar loss).
    #[error("contract error: {0}")]
    Contract(String),

    /// Bad user-supplied data such as an out-of-vocabulary token.
    #[error("input error: {0}")]
    Input(String),

    #[error("config error: {0}")]
    Config(String),

    /// A dataset or checkpoint failed validation while loading.
    #[error("load error in `{field}`: {reason}")]
    Load { field: String, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn load(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Load {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

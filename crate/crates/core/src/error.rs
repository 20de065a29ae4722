use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{what} = {value} is out of range ({range})")]
    OutOfRange {
        what: &'static str,
        value: String,
        range: String,
    },

    #[error("attention control `{0}` requires style statistics")]
    MissingStyle(&'static str),

    #[error("style statistics fingerprint {found:#018x} does not match model {expected:#018x}")]
    ConfigMismatch { expected: u64, found: u64 },

    #[error("online attention needs at least one key/value block")]
    EmptyBlocks,

    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),

    #[error("malformed statistics container: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

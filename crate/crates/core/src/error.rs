use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate scale for {0}: all-zero tensor has no quantization scale")]
    DegenerateScale(String),

    #[error("not calibrated: {0}")]
    NotCalibrated(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("planning error: {0}")]
    Planning(String),

    #[error("container format error: {0}")]
    Format(String),

    #[error("unsupported container version {found} (supported <= {supported})")]
    Version { found: u16, supported: u16 },

    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

use thiserror::Error;

/// Errors surfaced across the library.
#[derive(Error, Debug)]
pub enum InvMihError {
    #[error("shape error in {context}: expected {expected}, got {got}")]
    Shape {
        context: String,
        expected: String,
        got: String,
    },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch (file truncated or corrupt)")]
    CheckpointChecksum,

    #[error("checkpoint parameter block mismatch: {0}")]
    CheckpointShape(String),

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl InvMihError {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        InvMihError::Shape {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, InvMihError>;

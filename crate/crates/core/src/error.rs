use thiserror::Error;

/// Error type shared across the crate. Variants are grouped by the exit code
/// the CLI maps them to: config errors exit with 3, everything else with 4.
#[derive(Error, Debug)]
pub enum RiftError {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown attribute `{0}`")]
    UnknownAttribute(String),

    #[error("attribute `{name}`: index {index} out of arity {arity}")]
    AttributeOutOfRange {
        name: String,
        index: usize,
        arity: usize,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("stale cycle cache: built at step {cache_step}, current step {current_step}")]
    StaleCache { cache_step: u64, current_step: u64 },

    #[error("non-finite value in loss term `{0}`")]
    NonFinite(String),

    #[error("{0}")]
    Invalid(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: String, message: String },
}

impl RiftError {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        RiftError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// CLI exit code for this error: 3 for config problems, 4 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RiftError::Config(_) => 3,
            _ => 4,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("weights table is frozen; refusing to mutate {0}")]
    Frozen(String),

    #[error("unknown layer {0}")]
    UnknownLayer(String),

    #[error("stale expert: trained against base {found:016x}, serving base is {expected:016x}")]
    StaleExpert { expected: u64, found: u64 },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checksum mismatch: trailer says {stored:016x}, payload hashes to {computed:016x}")]
    Corrupt { stored: u64, computed: u64 },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u16),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("registry collision on {instruction:?}: {first} and {second}")]
    Collision {
        instruction: String,
        first: String,
        second: String,
    },

    #[error("missing adapter for {expert_id} at {path}: {reason}")]
    MissingAdapter {
        expert_id: String,
        path: PathBuf,
        reason: String,
    },

    #[error("no expert registered for instruction {0:?}")]
    UnknownTask(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown {what} {name:?}; known: {known}")]
    UnknownStrategy {
        what: &'static str,
        name: String,
        known: String,
    },
}

impl CoreError {
    /// Short machine-readable tag, used as the `kind` field on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreError::Shape { .. } => "shape",
            CoreError::Dimension { .. } => "dimension",
            CoreError::NonFinite(_) => "non_finite",
            CoreError::Config(_) => "config",
            CoreError::Frozen(_) => "frozen",
            CoreError::UnknownLayer(_) => "unknown_layer",
            CoreError::StaleExpert { .. } => "stale_expert",
            CoreError::Format(_) => "format",
            CoreError::Corrupt { .. } => "corrupt",
            CoreError::UnsupportedVersion(_) => "unsupported_version",
            CoreError::Io(_) => "io",
            CoreError::Collision { .. } => "collision",
            CoreError::MissingAdapter { .. } => "missing_adapter",
            CoreError::UnknownTask(_) => "unknown_task",
            CoreError::Contract(_) => "contract",
            CoreError::UnknownStrategy { .. } => "unknown_strategy",
        }
    }
}

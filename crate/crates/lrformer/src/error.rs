use lrformer_core::Error as CoreError;

use crate::netpbm::NetpbmError;
use crate::weights::WeightError;

/// Process exit statuses.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 1;
    pub const DATA: i32 = 2;
    pub const NUMERICAL: i32 = 3;
}

/// Anything that stops a command.
#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] CoreError),
    #[error(transparent)]
    Image(#[from] NetpbmError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("{path}: {source}")]
    Output { path: String, source: std::io::Error },
    #[error("gradient check failed: {failed} of {total} checks above tolerance {tolerance:e}")]
    GradientCheck { failed: usize, total: usize, tolerance: f64 },
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => exit::USAGE,
            Self::Model(e) => match e {
                CoreError::Config(_) | CoreError::Usage(_) => exit::USAGE,
                CoreError::NonFinite { .. } => exit::NUMERICAL,
                _ => exit::DATA,
            },
            Self::Image(_) | Self::Weights(_) | Self::Output { .. } => exit::DATA,
            Self::GradientCheck { .. } => exit::NUMERICAL,
        }
    }
}

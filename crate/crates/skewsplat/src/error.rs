//! Error type shared across the engine.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SplatError {
    /// Primitive parameters produced a non-finite or non-SPD shape.
    #[error("degenerate primitive {index}: {reason}")]
    DegeneratePrimitive { index: usize, reason: String },

    /// NaN/Inf appeared in a gradient; carries the offending parameter.
    #[error("non-finite gradient for primitive {index}, parameter {param}")]
    NonFiniteGradient { index: usize, param: &'static str },

    #[error("invalid camera: {0}")]
    InvalidCamera(String),

    /// Malformed scene/camera file; `line` is 1-based.
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl SplatError {
    /// Process exit code the CLI maps this error to.
    pub fn exit_code(&self) -> i32 {
        match self {
            SplatError::Config(_) => 2,
            SplatError::DegeneratePrimitive { .. }
            | SplatError::NonFiniteGradient { .. }
            | SplatError::Numerical(_) => 3,
            SplatError::InvalidCamera(_) | SplatError::Parse { .. } | SplatError::Io(_) => 4,
        }
    }
}

use thiserror::Error;

/// Errors produced by tensor construction, operators, fusion and archive I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor shape with a zero-sized dimension, or an operator that would
    /// produce one.
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    /// Operands whose shapes or layouts do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// An ill-formed configuration: bad channel/group arithmetic, malformed
    /// branch sets, unfusible structures, width <= 0 and the like.
    #[error("config error: {0}")]
    Config(String),

    /// A weight archive with a bad magic tag, version or manifest.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

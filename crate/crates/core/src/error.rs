use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("png codec error: {0}")]
    Codec(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid depth {0}, must be > 0")]
    InvalidDepth(f64),
    #[error("sample point ({u}, {v}) outside the grid")]
    OutOfBounds { u: f64, v: f64 },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("input has no valid pixels")]
    EmptyInput,
    #[error("no supervised pixels in the requested support")]
    NoSupport,
    #[error("prediction is identically zero on the support")]
    Degenerate,
    #[error("inverse metrics need positive predictions, got {0}")]
    InverseDomain(f64),
    #[error("function evaluation failed: {0}")]
    Evaluation(String),
    #[error("optimization diverged at step {step}")]
    Divergence { step: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

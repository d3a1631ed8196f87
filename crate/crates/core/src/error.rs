use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised anywhere in the monitoring pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("image has zero pixel variance and cannot be standardized")]
    ZeroVariance,
    #[error("pixel ({row}, {col}) has no full neighborhood of size l = {l}")]
    OutOfInteriorBounds { row: usize, col: usize, l: usize },
    #[error("image of {rows}x{cols} is too small: {reason}")]
    ImageTooSmall { rows: usize, cols: usize, reason: String },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: String, actual: String },
    #[error("not enough tail observations: {0}")]
    InsufficientTail(String),
    #[error("degenerate {0} tail: all tail residuals are identical")]
    DegenerateTail(&'static str),
    #[error("window of width {w} does not fit a {rows}x{cols} input")]
    WindowTooLarge { w: usize, rows: usize, cols: usize },
    #[error("statistic image has no valid pixels")]
    EmptyValidRegion,
    #[error("phase I sample is empty")]
    InsufficientPhaseI,
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("defect of {size_rows}x{size_cols} does not fit inside a {rows}x{cols} image at the requested position")]
    PlacementOutOfBounds { size_rows: usize, size_cols: usize, rows: usize, cols: usize },
    #[error("field is constant and cannot be rescaled")]
    ConstantField,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("image decode failed: {0}")]
    Decode(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable, machine-parsable name of the error kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::ZeroVariance => "ZeroVariance",
            Error::OutOfInteriorBounds { .. } => "OutOfInteriorBounds",
            Error::ImageTooSmall { .. } => "ImageTooSmall",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::InsufficientTail(_) => "InsufficientTail",
            Error::DegenerateTail(_) => "DegenerateTail",
            Error::WindowTooLarge { .. } => "WindowTooLarge",
            Error::EmptyValidRegion => "EmptyValidRegion",
            Error::InsufficientPhaseI => "InsufficientPhaseI",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::PlacementOutOfBounds { .. } => "PlacementOutOfBounds",
            Error::ConstantField => "ConstantField",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Format(_) => "FormatError",
            Error::Decode(_) => "DecodeError",
            Error::Io(_) => "IoError",
        }
    }

    pub(crate) fn too_small(rows: usize, cols: usize, reason: impl Into<String>) -> Self {
        Error::ImageTooSmall { rows, cols, reason: reason.into() }
    }

    pub(crate) fn mismatch(expected: impl ToString, actual: impl ToString) -> Self {
        Error::DimensionMismatch { expected: expected.to_string(), actual: actual.to_string() }
    }
}

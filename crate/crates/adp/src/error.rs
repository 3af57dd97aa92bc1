use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument is outside its mathematical domain (e.g. `sigma <= 0`).
    #[error("domain error: {0}")]
    Domain(String),

    /// Array dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Not enough rows to compute the requested statistic.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    /// A class label or index is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// The adaptive step-size probe found a locally constant or expanding
    /// score; no contraction rate can be estimated at this point.
    #[error("degenerate curvature: probe score does not contract")]
    DegenerateCurvature,

    /// A serialized payload has the wrong magic, version, or layout.
    #[error("format error: {0}")]
    Format(String),

    /// A serialized payload ended before its declared length.
    #[error("truncated payload: {0}")]
    Truncated(String),

    /// Two inputs that must agree in count do not.
    #[error("count mismatch: {0}")]
    Mismatch(String),

    /// An experiment configuration failed validation; the message names the
    /// offending field path.
    #[error("invalid config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

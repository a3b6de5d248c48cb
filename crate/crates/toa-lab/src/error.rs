//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the signal, estimator, and harness layers.
#[derive(Debug, Error)]
pub enum ToaError {
    /// Unknown numerology preset or inconsistent system configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Out-of-range or otherwise invalid argument.
    #[error("argument error: {0}")]
    Argument(String),

    /// Channel delay spread does not fit inside the cyclic prefix.
    #[error("delay spread {spread_s:.3e} s exceeds cyclic prefix {cp_s:.3e} s")]
    DelaySpread { spread_s: f64, cp_s: f64 },

    /// Correlation window runs past the end of the received stream.
    #[error("window error: need {needed} samples past anchor, stream ends at {available}")]
    Window { needed: usize, available: usize },

    /// Input carries no usable energy (e.g. all-zero full-band correlation).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Template matrix is singular (duplicate delay picked twice).
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    /// Too few valid subcarriers to run a subspace estimator.
    #[error("coverage error: {valid} of {required} required subcarriers valid")]
    Coverage { valid: usize, required: usize },

    /// Numeric failure inside an eigen or least-squares solve.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Tensor or layer dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset is missing a required case or mixes cases where one is expected.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Malformed dataset/checkpoint/report bytes.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ToaError>;

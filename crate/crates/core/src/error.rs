use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("step {t} out of range [{min}, {max}]")]
    StepOutOfRange { t: usize, min: usize, max: usize },

    #[error("invalid step order: {from} -> {to}")]
    StepOrder { from: usize, to: usize },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("frame {frame} has zero total merge weight")]
    ZeroDenominator { frame: usize },

    #[error("condition error: {0}")]
    Condition(String),

    #[error("{what} dimension mismatch: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("manifest error: {0}")]
    Manifest(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], found: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }
}

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModitError {
    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    DimensionMismatch {
        op: &'static str,
        expected: String,
        found: String,
    },
    #[error("degenerate mask: row {row} has no positive weight")]
    DegenerateMask { row: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },
    #[error("sequence of length {len} is too short (need at least {min})")]
    InsufficientSequence { len: usize, min: usize },
    #[error("index {index} out of range (limit {limit})")]
    IndexOutOfRange { index: usize, limit: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("sampler state became non-finite at t={t}")]
    Diverged { t: usize },
    #[error("request {index}: {source}")]
    InRequest {
        index: usize,
        #[source]
        source: Box<ModitError>,
    },
}

pub type Result<T> = std::result::Result<T, ModitError>;

pub(crate) fn shape_err(
    op: &'static str,
    expected: impl Into<String>,
    found: impl Into<String>,
) -> ModitError {
    ModitError::DimensionMismatch {
        op,
        expected: expected.into(),
        found: found.into(),
    }
}

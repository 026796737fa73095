use thiserror::Error;

/// Errors produced anywhere in the library.
///
/// Numeric payloads are carried as `f64` regardless of the scalar type the
/// computation ran in.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("rank deficient: smallest singular value {sigma:e} is below {threshold:e}")]
    RankDeficient { sigma: f64, threshold: f64 },

    #[error("instance generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("system recovery failed in {phase}: sigma_min(C0) = {sigma:e}")]
    Recovery { phase: &'static str, sigma: f64 },

    #[error("controller is not stabilizing: spectral radius {radius} exceeds {limit}")]
    Unstable { radius: f64, limit: f64 },

    #[error("comparator search failed: {0}")]
    Search(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

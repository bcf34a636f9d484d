//! Crate-wide error type and CLI exit-code mapping.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One violated field of an experiment configuration.
#[derive(Debug, Clone)]
pub struct FieldIssue {
    /// Dotted path into the config JSON, e.g. `model.eta`.
    pub path: String,
    pub message: String,
}

impl std::fmt::Display for FieldIssue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn format_issues(issues: &[FieldIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("  {i}"))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix trace numerically zero after PSD clipping (eigenvalue sum {sum:.3e})")]
    ZeroTrace { sum: f64 },

    #[error("pair embedding requires two distinct sites, got {site} twice")]
    IndexCollision { site: usize },

    #[error("site index {site} outside 1..={n_sites}")]
    SiteOutOfRange { site: usize, n_sites: usize },

    #[error("problem size exceeds resource guard: {0}")]
    TooLarge(String),

    #[error("kernel is not a graphon: {0}")]
    RangeError(String),

    #[error("non-finite noise increment")]
    NonFiniteNoise,

    #[error("counting detection requires unitary L (||LL^dag - I|| = {deviation:.3e})")]
    NonUnitaryL { deviation: f64 },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("raw Euler increment broke trace conservation: |tr| = {drift:.3e}")]
    TraceDrift { drift: f64 },

    #[error("not a density matrix: {0}")]
    InvalidDensity(String),

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("config validation failed:\n{}", format_issues(issues))]
    Validation { issues: Vec<FieldIssue> },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl Error {
    pub fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            issues: vec![FieldIssue {
                path: path.into(),
                message: message.into(),
            }],
        }
    }

    /// CLI exit code: 2 validation, 3 numerical failure, 4 resource guard.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::DimensionMismatch(_)
            | Error::IndexCollision { .. }
            | Error::SiteOutOfRange { .. }
            | Error::RangeError(_)
            | Error::NonUnitaryL { .. }
            | Error::GridMismatch(_)
            | Error::InvalidDensity(_)
            | Error::Parse(_)
            | Error::Validation { .. } => 2,
            Error::ZeroTrace { .. }
            | Error::NonFiniteNoise
            | Error::TraceDrift { .. }
            | Error::Numerical(_) => 3,
            Error::TooLarge(_) => 4,
            Error::Io(_) => 1,
        }
    }
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// The availability-weighted preference mass of some row is zero: the
    /// user's whole preference sits on unavailable providers.
    #[error("preference mass on available providers is {mass:e} (<= {tol:e})")]
    SingularPreference { mass: f64, tol: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("boundary value: {0}")]
    BoundaryValue(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("active provider set is empty")]
    EmptyActiveSet,

    #[error("data error: {0}")]
    Data(String),

    #[error("log density is not finite at the initial point after {attempts} attempts")]
    NonFiniteDensity { attempts: usize },

    #[error("degenerate chains: {0}")]
    DegenerateChains(String),

    #[error("need at least {needed} predictive draws, found {found}")]
    InsufficientDraws { needed: usize, found: usize },

    #[error("need at least {needed} samples, found {found}")]
    InsufficientSamples { needed: usize, found: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}: {msg}")]
    Invariant { row: usize, msg: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line pipeline.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Invariant { .. } | Error::Data(_) => 3,
            _ => 1,
        }
    }
}

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure category, used by callers that need to map errors to exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("insufficient data for {asset} on {day}: {reason}")]
    InsufficientData { asset: String, day: String, reason: String },

    #[error("insufficient history at origin {origin}: need at least {required} prior rows")]
    InsufficientHistory { origin: usize, required: usize },

    #[error("empty target: horizon {horizon} leaves no rows in a panel of {rows} rows")]
    EmptyTarget { horizon: usize, rows: usize },

    #[error("unstable data-generating process: companion spectral radius {radius:.6} >= 1")]
    UnstableDgp { radius: f64 },

    #[error("parse error at line {line}, field `{field}`: {message}")]
    Parse {
        line: usize,
        field: String,
        message: String,
    },

    #[error("panel has holes: {missing} missing (date, asset) cells, first: {first}")]
    PanelHole { missing: usize, first: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("rank-deficient design: collinear columns {columns:?}")]
    RankDeficient { columns: Vec<String> },

    #[error("graphical lasso did not converge after {iterations} sweeps (last objective {objective})")]
    NonConvergence { iterations: usize, objective: f64 },

    #[error("degenerate covariance: column {column} has zero variance")]
    DegenerateCovariance { column: usize },

    #[error("training diverged at epoch {epoch}, step {step}: non-finite loss")]
    DivergedTraining { epoch: usize, step: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("insufficient history for backtest: need {required} days, have {available}")]
    InsufficientWindow { required: usize, available: usize },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn with_context(self, context: impl Into<String>) -> Error {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Error {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Context { source, .. } => source.class(),
            Error::InvalidInput(_) => ErrorClass::Config,
            Error::InsufficientData { .. }
            | Error::InsufficientHistory { .. }
            | Error::EmptyTarget { .. }
            | Error::Parse { .. }
            | Error::PanelHole { .. }
            | Error::InsufficientWindow { .. }
            | Error::Io { .. } => ErrorClass::Data,
            Error::UnstableDgp { .. }
            | Error::Shape(_)
            | Error::RankDeficient { .. }
            | Error::NonConvergence { .. }
            | Error::DegenerateCovariance { .. }
            | Error::DivergedTraining { .. }
            | Error::Degenerate(_) => ErrorClass::Numerical,
        }
    }
}

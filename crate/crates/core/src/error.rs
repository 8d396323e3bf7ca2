use thiserror::Error;

/// Errors raised by the solver, the simulators and the file loaders.
#[derive(Debug, Error)]
pub enum Error {
    #[error("jump law has a divergent mean: up-rate {0} must exceed 1")]
    DivergentJumpMean(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("imaginary residue {residue:e} exceeds {limit:e} after inverse transform")]
    ImaginaryResidue { residue: f64, limit: f64 },

    #[error("initial wealth {wealth} lies outside the grid range [{min}, {max}]")]
    WealthOutsideGrid { wealth: f64, min: f64, max: f64 },

    #[error("W* maximizer {0} sits on the scan boundary; widen the scan range")]
    ScanBoundary(f64),

    #[error("policy does not match scenario: {0}")]
    PolicyMismatch(String),

    #[error("return series, line {line}: {reason}")]
    Series { line: usize, reason: String },

    #[error("empty sample")]
    EmptySample,

    #[error("config: {0}")]
    Config(String),

    #[error("policy file: {0}")]
    PolicyFormat(String),

    /// The message already carries the inner error, so it is not exposed
    /// again as a source.
    #[error("{stage}: {inner}")]
    Stage { stage: String, inner: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps an error with the name of the pipeline stage that produced it.
    pub fn in_stage(self, stage: impl Into<String>) -> Self {
        Error::Stage {
            stage: stage.into(),
            inner: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

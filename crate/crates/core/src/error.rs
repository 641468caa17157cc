use thiserror::Error;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum PsceError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("column `{column}` row {row}: expected 0 or 1, found `{value}`")]
    NonBinaryFlag {
        column: String,
        row: usize,
        value: String,
    },
    #[error("row {row}: observed time must be positive, found {value}")]
    NonPositiveTime { row: usize, value: f64 },
    #[error("row {row}: missing or unparsable value in column `{column}`")]
    MissingValue { row: usize, column: String },
    #[error("csv error: {0}")]
    Csv(String),
    #[error("io error: {0}")]
    Io(String),

    #[error("cell (Z={z}, S={s}) has no subjects")]
    EmptyCell { z: u8, s: u8 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("response `{0}` is constant; logistic model is not identifiable")]
    DegenerateResponse(String),
    #[error("monotone likelihood in logistic fit (complete or quasi-complete separation)")]
    Separation,
    #[error("no events available for Cox fit in cell (Z={z}, S={s})")]
    NoEvents { z: u8, s: u8 },
    #[error("monotone partial likelihood in Cox fit for cell (Z={z}, S={s})")]
    MonotoneLikelihood { z: u8, s: u8 },
    #[error("singular information matrix ({0})")]
    Singular(String),

    #[error("stratum `{0}` has estimated share below the truncation floor")]
    DegenerateStratum(String),
    #[error("denominator `{0}` below the truncation floor")]
    DegenerateDenominator(String),
    #[error("defier ratio {zeta} is inadmissible: {reason}")]
    InadmissibleZeta { zeta: f64, reason: String },
    #[error("estimated complier share p1 - p0 = {0} is not positive")]
    NonPositiveComplierShare(f64),

    #[error("{failed} of {total} bootstrap replicates failed (limit 5%)")]
    TooManyFailures { failed: usize, total: usize },
}

impl PsceError {
    /// Data errors stem from the input file rather than from the numerics.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            PsceError::MissingColumn(_)
                | PsceError::NonBinaryFlag { .. }
                | PsceError::NonPositiveTime { .. }
                | PsceError::MissingValue { .. }
                | PsceError::Csv(_)
                | PsceError::Io(_)
                | PsceError::EmptyCell { .. }
                | PsceError::DimensionMismatch { .. }
        )
    }
}

impl From<csv::Error> for PsceError {
    fn from(e: csv::Error) -> Self {
        PsceError::Csv(e.to_string())
    }
}

impl From<std::io::Error> for PsceError {
    fn from(e: std::io::Error) -> Self {
        PsceError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, PsceError>;

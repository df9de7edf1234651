//! Crate-wide error type.

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors that can occur during generation, estimation and backtesting.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Insufficient observations for the requested operation
    #[error("insufficient data: need at least {required} observations, got {actual}")]
    InsufficientData { required: usize, actual: usize },

    /// Incompatible matrix/vector dimensions
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A scalar parameter is outside its admissible domain
    #[error("invalid parameter: {0}")]
    Domain(String),

    /// Non-finite or otherwise unusable data
    #[error("invalid data: {0}")]
    Data(String),

    /// A matrix is too ill-conditioned (or indefinite) to solve against
    #[error("conditioning failure: {0}")]
    Conditioning(String),

    /// Exposure rows (or regressors) do not have full rank
    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    /// Degenerate statistical input (zero variance and the like)
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// Collinear regressors in a factor regression
    #[error("collinear factor series: {0}")]
    Collinearity(String),

    /// Equality constraints are inconsistent or coincide
    #[error("constraint failure: {0}")]
    Constraint(String),

    /// A Monte-Carlo fit kept failing after bounded retries
    #[error("fit failure: {0}")]
    FitFailure(String),

    /// Too many (period, subset) cells were skipped in a backtest
    #[error("backtest skipped {skipped} of {total} subset-periods (limit {limit_pct}%)")]
    TooManySkips { skipped: usize, total: usize, limit_pct: f64 },

    /// CSV parse/shape problem, with row context where available
    #[error("csv error: {0}")]
    Csv(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

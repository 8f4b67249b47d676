use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {block} at row {row}, column {col}")]
    NonFinite {
        block: &'static str,
        row: usize,
        col: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A quadratic form βᵀΦβ fell below the positivity tolerance.
    #[error("degenerate direction: quadratic form {value:e} is below tolerance {tolerance:e}")]
    DegenerateDirection { value: f64, tolerance: f64 },

    #[error("zero vector supplied where a direction is required")]
    ZeroVector,

    #[error("internal consistency violation: {0}")]
    InternalConsistency(String),

    #[error("kernel weights vanish at sample {index}")]
    VanishingDenominator { index: usize },

    #[error("no subject passes the density cutoff b = {cutoff:e}")]
    AllTruncated { cutoff: f64 },

    #[error("covariance estimate is singular (condition number {condition:e})")]
    SingularPhi { condition: f64 },

    #[error("r0 must lie in [0, 1), got {0}")]
    InvalidR0(f64),

    #[error("p-value {value} at position {index} is outside [0, 1]")]
    PValueOutOfRange { index: usize, value: f64 },

    #[error("unknown taxonomic rank: {0}")]
    UnknownRank(String),

    #[error("zero abundance at sample {row}, taxon {col} requires a positive pseudocount")]
    ZeroWithoutPseudocount { row: usize, col: usize },

    #[error("reference taxon {0} not present in table")]
    MissingReference(String),

    #[error("every metabolite was removed by the missingness filter")]
    AllMetabolitesDropped,

    #[error("too many failed splits: {failed} of {total}")]
    NotEstimable { failed: usize, total: usize },

    #[error("{path}: line {line}, column {column}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

impl Error {
    /// True for failures that come from the numerics (singular Φ̂, truncation,
    /// degenerate directions) rather than from the inputs' shape or syntax.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DegenerateDirection { .. }
                | Error::ZeroVector
                | Error::InternalConsistency(_)
                | Error::VanishingDenominator { .. }
                | Error::AllTruncated { .. }
                | Error::SingularPhi { .. }
                | Error::NotEstimable { .. }
        )
    }
}

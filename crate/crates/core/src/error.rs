use thiserror::Error;

pub type Result<T> = std::result::Result<T, AllocError>;

/// Errors raised by the allocation engines.
///
/// Every variant maps to a stable `code()` string and the engine `module()`
/// that raised it; the CLI and HTTP layers surface both verbatim.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum AllocError {
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),
    #[error("prior Schur complement nu - rho gamma^-1 rho' is not diagonal (off-diagonal {off_diagonal:e}, tolerance {tolerance:e})")]
    SchurNotDiagonal { off_diagonal: f64, tolerance: f64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("linear system is singular: {0}")]
    SingularSystem(String),
    #[error("imbalance matrix Phi is not invertible")]
    SingularPhi,
    #[error("risk denominator is not positive ({denominator:e}); the design is numerically degenerate")]
    NonPositiveDenominator { denominator: f64 },
    #[error("pseudo-sample sizes h1^2 = {h1_sq}, h2^2 = {h2_sq} are not integers")]
    NonIntegerH2 { h1_sq: f64, h2_sq: f64 },
    #[error("allocation leaves an arm empty (n_C = {n_c}, n_T = {n_t})")]
    EmptyArm { n_c: usize, n_t: usize },
    #[error("covariate scatter matrix is singular")]
    SingularScatter,
    #[error("design is degenerate: risk denominator {denominator:e} is not positive")]
    DegenerateDesign { denominator: f64 },
    #[error("no feasible allocation satisfies the constraint: {0}")]
    InfeasibleConstraint(String),
    #[error("n = {n} exceeds the exhaustive enumeration limit {limit}")]
    TooLargeForExhaustive { n: usize, limit: usize },
    #[error("equal-split condition requires even n, got n = {0}")]
    OddN(usize),
    #[error("centered Gram matrix X'X is singular")]
    SingularGram,
    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("batch {0} already has recorded outcomes")]
    AlreadyScored(usize),
    #[error("unknown batch index {0}")]
    UnknownBatch(usize),
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

impl AllocError {
    pub fn code(&self) -> &'static str {
        match self {
            AllocError::InvalidPrior(_) => "InvalidPrior",
            AllocError::NotPositiveDefinite(_) => "NotPositiveDefinite",
            AllocError::SchurNotDiagonal { .. } => "SchurNotDiagonal",
            AllocError::DimensionMismatch(_) => "DimensionMismatch",
            AllocError::SingularSystem(_) => "SingularSystem",
            AllocError::SingularPhi => "SingularPhi",
            AllocError::NonPositiveDenominator { .. } => "NonPositiveDenominator",
            AllocError::NonIntegerH2 { .. } => "NonIntegerH2",
            AllocError::EmptyArm { .. } => "EmptyArm",
            AllocError::SingularScatter => "SingularScatter",
            AllocError::DegenerateDesign { .. } => "DegenerateDesign",
            AllocError::InfeasibleConstraint(_) => "InfeasibleConstraint",
            AllocError::TooLargeForExhaustive { .. } => "TooLargeForExhaustive",
            AllocError::OddN(_) => "OddN",
            AllocError::SingularGram => "SingularGram",
            AllocError::LengthMismatch { .. } => "LengthMismatch",
            AllocError::AlreadyScored(_) => "AlreadyScored",
            AllocError::UnknownBatch(_) => "UnknownBatch",
            AllocError::InvalidInput(_) => "InvalidInput",
        }
    }

    pub fn module(&self) -> &'static str {
        match self {
            AllocError::InvalidPrior(_)
            | AllocError::NotPositiveDefinite(_)
            | AllocError::SchurNotDiagonal { .. }
            | AllocError::DimensionMismatch(_)
            | AllocError::SingularSystem(_)
            | AllocError::InvalidInput(_) => "model",
            AllocError::SingularPhi
            | AllocError::NonPositiveDenominator { .. }
            | AllocError::NonIntegerH2 { .. }
            | AllocError::EmptyArm { .. }
            | AllocError::SingularScatter
            | AllocError::DegenerateDesign { .. } => "risk",
            AllocError::InfeasibleConstraint(_) | AllocError::TooLargeForExhaustive { .. } => {
                "allocator"
            }
            AllocError::OddN(_) | AllocError::SingularGram => "balance",
            AllocError::LengthMismatch { .. }
            | AllocError::AlreadyScored(_)
            | AllocError::UnknownBatch(_) => "sequential",
        }
    }

    /// Whether the error means "no admissible allocation" rather than bad
    /// input or a numerical failure.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            AllocError::InfeasibleConstraint(_) | AllocError::OddN(_)
        )
    }
}

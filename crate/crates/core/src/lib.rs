//! Bayes-risk allocation of experimental units to treatment and control.
//!
//! Under a conjugate Normal-Inverse-Gamma linear model, the decision risk of
//! an allocation is the posterior variance of the treatment contrast. This
//! crate evaluates it in closed form, searches for minimizing allocations
//! (one shot or batch by batch), tests when an equal split is optimal, and
//! keeps a direct-inversion oracle for cross-checking.

pub mod allocator;
pub mod balance;
pub mod config;
pub mod error;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod risk;
pub mod sequential;
pub mod sweep;

pub use allocator::{
    optimize, optimize_equal_split, search, GroupSizeConstraint, OptimizationResult, OptimizerConfig,
    SearchMode,
};
pub use balance::{counterexample_table, equal_split_condition, hat_quadratic_form, EqualSplitOptions, EqualSplitReport};
pub use config::PriorSpec;
pub use error::{AllocError, Result};
pub use model::{decompose_prior, posterior_update, Allocation, CovariateMatrix, NigPrior, PriorDecomposition};
pub use oracle::risk_direct;
pub use risk::{risk_flat, risk_for_prior, risk_general, risk_pseudo_sample, RiskBreakdown, RiskEvaluator};
pub use sequential::{open_session, BatchRequest, SequentialSession, SessionSnapshot};

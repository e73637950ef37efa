use thiserror::Error;

use crate::mdp::ValidationReport;

/// Errors produced by model construction, solvers and combiners.
#[derive(Debug, Error)]
pub enum Error {
    /// Structural MDP validation failed; the report lists every violation.
    #[error("invalid MDP: {0}")]
    InvalidMdp(ValidationReport),

    #[error("invalid policy family: {0}")]
    InvalidFamily(String),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("invalid mixture vector: {0}")]
    InvalidMixture(String),

    #[error("invalid binary word {0:?}: words use characters '0' and '1' only")]
    InvalidWord(String),

    #[error("word has length {got}, expected {expected}")]
    WordLength { expected: usize, got: usize },

    #[error("action {action} out of range in state {state} ({available} available)")]
    ActionRange {
        state: usize,
        action: usize,
        available: usize,
    },

    /// Dimensions or index ranges of two arguments do not fit together.
    #[error("incompatible arguments: {0}")]
    Incompatible(String),

    #[error("invalid solve options: {0}")]
    InvalidOptions(String),

    /// The linear system for the stationary distribution has no unique
    /// solution; the chain is likely not irreducible.
    #[error("singular stationary system (chain not irreducible, or numerically degenerate)")]
    SingularSystem,

    /// A computed distribution has a non-positive entry, which an ergodic
    /// chain cannot produce; signals a precondition violation.
    #[error("non-positive entry {value:.3e} at state {state} in computed distribution")]
    NonPositiveResult { state: usize, value: f64 },

    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),

    /// |sum of nu| fell below the relative threshold; the family does not
    /// determine the requested policy (e.g. the base policies agree at one
    /// of the differing states) or the instance cancels catastrophically.
    #[error("degenerate denominator {denominator:.3e} against scale {scale:.3e}")]
    DegenerateDenominator { denominator: f64, scale: f64 },

    /// Every admissible permutation set is empty: the deterministic-word
    /// formula has no surviving term.
    #[error("all permutation sets are empty; the family does not determine the target word")]
    EmptyNumerator,

    #[error("n = {0} exceeds the permutation enumeration guard (max {1})")]
    EnumerationGuard(usize, usize),

    #[error("invalid generator spec: {0}")]
    InvalidGenSpec(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

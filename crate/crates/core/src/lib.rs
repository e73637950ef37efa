//! Stationary distributions of combined policies in unichain MDPs.
//!
//! Take n + 1 deterministic policies that agree everywhere except on n
//! states, where each picks one of two actions. Once their stationary
//! distributions are known, the stationary distribution of *any* policy
//! assembled from those choices — including randomized mixtures — follows
//! from a closed-form signed sum over permutations, with no further linear
//! solves. This crate implements that formula, two independent chain
//! solvers to verify it against, and a seeded instance generator.
//!
//! ```
//! use unichain::combine::{combine_randomized, Evaluator};
//! use unichain::mdp::MixtureVector;
//! use unichain::randgen::{random_family, GenSpec};
//! use unichain::statdist::stationary_linear;
//!
//! let family = random_family(&GenSpec::new(6, 2, 42).unwrap()).unwrap();
//! let lambdas = MixtureVector::new(vec![0.5, 0.25]).unwrap();
//! let from_formula = combine_randomized(&family, &lambdas, Evaluator::Determinant).unwrap();
//! let from_solver =
//!     stationary_linear(&family.mixed_matrix(&lambdas).unwrap()).unwrap();
//! assert!(from_formula.max_abs_diff(&from_solver) < 1e-9);
//! ```

pub mod combine;
pub mod error;
pub mod json;
pub mod mdp;
pub mod randgen;
pub mod statdist;

pub use error::{Error, Result};

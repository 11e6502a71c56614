//! Concrete problem constructions for the MSA engine.
//!
//! Two families are provided:
//!
//! * [`QuadraticBilevelInstance`] — a federated quadratic bilevel problem
//!   with closed-form ground truth (inner solution, adjoint vector,
//!   hypergradient, and outer minimizer), mapped to a single-sequence
//!   [`MsaProblem`](crate::msa::MsaProblem) by [`bilevel_to_msa`].
//! * [`RiskAverseMcoInstance`] — a three-level risk-averse compositional
//!   problem over a regression dataset split across clients, mapped to a
//!   two-sequence problem by [`mco_to_msa`].
//!
//! Instances are plain serializable data; the conversion functions validate
//! them and precompute population quantities.  The resulting problems are
//! immutable, and their oracles are pure functions of the sample token, as
//! the engine requires.

mod bilevel;
mod mco;

pub use bilevel::{
    bilevel_to_msa, closed_form_hypergradient, BilevelClientData, BilevelProblem,
    QuadraticBilevelInstance,
};
pub use mco::{mco_to_msa, RiskAverseMcoInstance, RiskAverseProblem};

pub(crate) use bilevel::normal_matrix;

use thiserror::Error;

/// Errors raised while validating or assembling a problem instance.
#[derive(Debug, Error)]
pub enum InstanceError {
    /// The instance data is structurally invalid (dimension mismatch, empty
    /// client, parameter out of range, …).
    #[error("invalid instance: {0}")]
    Invalid(String),
    /// A required population quantity could not be computed (for the bilevel
    /// family: the averaged inner matrix is not positive definite).
    #[error("instance construction failed: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
}

pub type Result<T> = std::result::Result<T, InstanceError>;

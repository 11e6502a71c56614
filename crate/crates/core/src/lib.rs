//! Federated multi-sequence stochastic approximation (FedMSA) simulator.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`] — dense vectors/matrices and the few decompositions the
//!   simulator needs (power iteration, Jacobi eigensolver, Cholesky).
//! * [`rng`] — hierarchical counter-based stream keys so every stochastic
//!   quantity is a pure function of `(master seed, logical path)`.
//! * [`neumann`] — stochastic truncated-Neumann estimators for
//!   inverse-Hessian-vector products, with their bias/variance certificates.
//! * [`stats`] — Monte-Carlo moment estimation and covariance-order checks.
//! * [`msa`] — the federated MSA engine: momentum-corrected global rounds,
//!   recursive local correction steps on a sampled client, trajectory records.
//! * [`instances`] — concrete problem families (quadratic bilevel with closed
//!   forms, a three-level risk-averse compositional model) mapped onto the
//!   engine's operator interface.
//! * [`baselines`] — centralized single-sequence MSA and a frozen-indirect
//!   federated variant, for mechanism comparisons.
//! * [`datagen`] — synthetic dataset generation and heterogeneity-controlled
//!   client partitioning.
//! * [`verify`] — reusable verification harnesses (estimator bounds over a
//!   parameter grid, covariance ordering) shared by tests and the CLI.
//!
//! Everything is deterministic: two runs with the same seed and configuration
//! produce bitwise-identical trajectories regardless of thread count.

pub mod baselines;
pub mod datagen;
pub mod instances;
pub mod msa;
pub mod neumann;
pub mod numerics;
pub mod rng;
pub mod stats;
pub mod verify;

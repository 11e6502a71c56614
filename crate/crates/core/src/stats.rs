//! Monte-Carlo moment estimation and covariance-ordering checks.
//!
//! The estimator comparison at the heart of this module: the random-index
//! inverse-Hessian estimator never has smaller covariance than the averaged
//! one.  [`verify_est_order`] estimates both covariances empirically with a
//! shared trial count and checks the positive-semidefinite ordering through a
//! single scalar witness, `λ_min(Cov_rand − Cov_avg)`, allowing a slack that
//! shrinks like `1/√trials`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::neumann::{
    stochastic_ihvp_avg, stochastic_ihvp_rand, HessianSampler, NeumannConfig, NeumannError,
};
use crate::numerics::{min_eigenvalue_symmetric, Matrix, NumericsError, Vector};
use crate::rng::StreamKey;

/// Multiplier `c` in the Monte-Carlo slack `c·max(trace)/√trials`.
const SLACK_TRACE_MULTIPLIER: f64 = 5.0;
/// Absolute slack floor so exactly-zero covariances compare cleanly.
const SLACK_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("draw dimension changed between trials: {0} vs {1}")]
    DimensionChanged(usize, usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Estimator(#[from] NeumannError),
}

pub type Result<T> = std::result::Result<T, StatsError>;

/// Empirical first and second moments of a vector-valued randomized draw.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub mean: Vector,
    /// Unbiased sample covariance (divisor `trials − 1`), symmetric.
    pub covariance: Matrix,
    pub trials: usize,
    /// `1/√trials`, the scale of the mean's standard error per unit stddev.
    pub standard_error_scale: f64,
}

/// Runs `draw` for `trials` independent substreams of `key` and returns the
/// sample mean and unbiased sample covariance.
///
/// Trial `t` receives the substream `key.child(t)`, so results are identical
/// for any thread count; trials run in parallel.
pub fn monte_carlo_moments<F>(draw: F, trials: usize, key: &StreamKey) -> Result<MomentReport>
where
    F: Fn(&StreamKey) -> Vector + Sync,
{
    if trials < 2 {
        return Err(StatsError::Invalid(format!("need at least 2 trials, got {trials}")));
    }
    let samples: Vec<Vector> =
        (0..trials as u64).into_par_iter().map(|t| draw(&key.child(t))).collect();

    let dim = samples[0].len();
    for s in &samples {
        if s.len() != dim {
            return Err(StatsError::DimensionChanged(dim, s.len()));
        }
    }

    // Accumulate relative to the first sample.  The moments are shift
    // invariant, cancellation is reduced, and a constant draw yields an
    // exactly zero covariance (and the exact mean) for any trial count.
    let pivot = &samples[0];
    let mut mean_shift = Vector::zeros(dim);
    for s in &samples {
        let d = s - pivot;
        mean_shift.add_scaled(1.0, &d);
    }
    mean_shift.scale_in_place(1.0 / trials as f64);
    let mut cov = Matrix::zeros(dim, dim);
    for s in &samples {
        let mut d = s - pivot;
        d.add_scaled(-1.0, &mean_shift);
        for i in 0..dim {
            for j in i..dim {
                let inc = d[i] * d[j] / (trials - 1) as f64;
                cov.set(i, j, cov.get(i, j) + inc);
            }
        }
    }
    let mut mean = pivot.clone();
    mean.add_scaled(1.0, &mean_shift);
    for i in 0..dim {
        for j in 0..i {
            cov.set(i, j, cov.get(j, i));
        }
    }
    Ok(MomentReport {
        mean,
        covariance: cov,
        trials,
        standard_error_scale: 1.0 / (trials as f64).sqrt(),
    })
}

/// Result of a PSD-ordering check `cov_high ⪰ cov_low` up to `slack`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CovarianceOrder {
    pub holds: bool,
    /// `λ_min(cov_high − cov_low)`; nonnegative when the order holds exactly.
    pub witness_eigenvalue: f64,
}

/// Checks `λ_min(cov_high − cov_low) ≥ −slack`.
///
/// Both inputs must be symmetric with equal dimensions; the witness
/// eigenvalue is returned alongside the verdict.
pub fn check_covariance_order(
    cov_high: &Matrix,
    cov_low: &Matrix,
    slack: f64,
) -> Result<CovarianceOrder> {
    if !(slack >= 0.0) {
        return Err(StatsError::Invalid(format!("slack must be ≥ 0, got {slack}")));
    }
    if (cov_high.rows(), cov_high.cols()) != (cov_low.rows(), cov_low.cols()) {
        return Err(NumericsError::Dimension(format!(
            "covariance shapes differ: {}x{} vs {}x{}",
            cov_high.rows(),
            cov_high.cols(),
            cov_low.rows(),
            cov_low.cols()
        ))
        .into());
    }
    // Validate symmetry of the inputs, then symmetrize the difference to kill
    // subtraction rounding before the eigensolve.
    min_eigenvalue_symmetric(cov_high, f64::INFINITY)?;
    min_eigenvalue_symmetric(cov_low, f64::INFINITY)?;
    let diff = cov_high.sub(cov_low).symmetrized();
    let witness = min_eigenvalue_symmetric(&diff, 1e-12)?;
    Ok(CovarianceOrder { holds: witness >= -slack, witness_eigenvalue: witness })
}

/// Outcome of the empirical Est1-vs-Est2 covariance comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstOrderReport {
    pub trials: usize,
    /// `λ_min(Cov_rand − Cov_avg)`.
    pub witness_eigenvalue: f64,
    /// `tr(Cov_rand − Cov_avg)`.
    pub trace_gap: f64,
    /// Monte-Carlo slack used: `5·max(traces)/√trials` plus a tiny floor.
    pub slack: f64,
    pub pass: bool,
}

/// Estimates the output covariances of the random-index and averaged
/// inverse-Hessian estimators on `trials` independent draws each and checks
/// `Cov(rand) ⪰ Cov(avg)` up to Monte-Carlo slack.
///
/// The two estimators use independent randomness (substreams 1 and 2 of
/// `key`); their trial counts are shared so the slack applies to both.
pub fn verify_est_order(
    sampler: &HessianSampler,
    cfg: &NeumannConfig,
    v: &Vector,
    trials: usize,
    key: &StreamKey,
) -> Result<EstOrderReport> {
    // Surface estimator argument errors eagerly; the trial closures below
    // can then unwrap safely.
    stochastic_ihvp_avg(sampler, cfg, v, &key.child(0))?;
    let rand_report = monte_carlo_moments(
        |k| stochastic_ihvp_rand(sampler, cfg, v, k).expect("estimator arguments pre-validated"),
        trials,
        &key.child(1),
    )?;
    let avg_report = monte_carlo_moments(
        |k| stochastic_ihvp_avg(sampler, cfg, v, k).expect("estimator arguments pre-validated"),
        trials,
        &key.child(2),
    )?;

    let tr_rand = rand_report.covariance.trace();
    let tr_avg = avg_report.covariance.trace();
    let slack =
        SLACK_TRACE_MULTIPLIER * tr_rand.max(tr_avg) / (trials as f64).sqrt() + SLACK_FLOOR;
    let order = check_covariance_order(&rand_report.covariance, &avg_report.covariance, slack)?;
    let trace_gap = tr_rand - tr_avg;
    Ok(EstOrderReport {
        trials,
        witness_eigenvalue: order.witness_eigenvalue,
        trace_gap,
        slack,
        pass: order.holds && trace_gap >= -slack,
    })
}

//! Grid verification of the inverse-Hessian estimator certificates.
//!
//! [`verify_neumann_grid`] sweeps deterministic test instances over
//! dimensions, condition numbers and noise levels, estimates the bias and
//! variance of the averaged estimator by Monte Carlo, and checks them against
//! the certificates from [`crate::neumann`].  [`verify_covariance_order_grid`]
//! runs the random-index-vs-averaged covariance comparison on the same
//! instances.  Both produce serializable reports; the CLI prints them and the
//! test suite asserts on them.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instances::normal_matrix;
use crate::neumann::{
    bias_bound, stochastic_ihvp_avg, variance_bound_general, variance_bound_small_noise,
    HessianSampler, NeumannConfig, NeumannError, NoiseModel,
};
use crate::numerics::{solve_spd, spectral_norm, sym_eigen, Matrix, NumericsError, Vector};
use crate::rng::{domain, standard_normal_vector, StreamKey};
use crate::stats::{monte_carlo_moments, verify_est_order, EstOrderReport, StatsError};

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("invalid verification grid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Neumann(#[from] NeumannError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

/// Grid axes and Monte-Carlo budget for the verification sweeps.
///
/// Every field has a default, so `{}` is a valid JSON config.  The default
/// grid covers dimensions `{1, 2, 5}`, condition numbers `{1.5, 4, 10}` and
/// noise levels `Ξκ ∈ {0.1, 0.5}` — one inside and one outside the
/// small-noise regime `Ξκ ≤ 1/4`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyGridConfig {
    pub dims: Vec<usize>,
    pub kappas: Vec<f64>,
    /// Products `Ξ·κ`; each cell's noise budget is `Ξ = xi_kappa/κ`.
    pub xi_kappas: Vec<f64>,
    /// Series rounds `N` of the estimators under test.
    pub n: usize,
    /// Minibatch size per round.
    pub b: usize,
    pub trials: usize,
    pub seed: u64,
}

impl Default for VerifyGridConfig {
    fn default() -> Self {
        Self {
            dims: vec![1, 2, 5],
            kappas: vec![1.5, 4.0, 10.0],
            xi_kappas: vec![0.1, 0.5],
            n: 8,
            b: 1,
            trials: 100_000,
            seed: 91,
        }
    }
}

impl VerifyGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.kappas.is_empty() || self.xi_kappas.is_empty() {
            return Err(VerifyError::Invalid("every grid axis needs at least one value".into()));
        }
        if self.dims.iter().any(|&d| d == 0) {
            return Err(VerifyError::Invalid("dimensions must be ≥ 1".into()));
        }
        if self.kappas.iter().any(|&k| !(k >= 1.0 && k.is_finite())) {
            return Err(VerifyError::Invalid("condition numbers must be finite and ≥ 1".into()));
        }
        if self.xi_kappas.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
            return Err(VerifyError::Invalid("xi_kappa values must be finite and ≥ 0".into()));
        }
        if self.n == 0 || self.b == 0 {
            return Err(VerifyError::Invalid("n and b must be ≥ 1".into()));
        }
        if self.trials < 2 {
            return Err(VerifyError::Invalid("need at least 2 trials".into()));
        }
        Ok(())
    }

    fn axes(&self) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        self.dims.iter().flat_map(move |&dim| {
            self.kappas.iter().flat_map(move |&kappa| {
                self.xi_kappas.iter().map(move |&xk| (dim, kappa, xk))
            })
        })
    }
}

/// Builds the deterministic test instance of one grid cell.
///
/// The scale is normalized to `L = 1`, `μ = 1/κ`.  The noise budget
/// `Ξ = xi_kappa/κ` is split evenly between the per-sample level `σ²`
/// (two-point noise along a seeded direction) and the inter-client level `σ̄²`
/// (a two-client population `H̄ ± σ̄·Δ` with `‖Δ‖ = 1`), except that `σ̄` is
/// capped at `(L − μ)/2` — with the mean spectrum shrunk to
/// `[μ + σ̄, L − σ̄]` — so every client Hessian stays inside the
/// strong-convexity band; any remainder moves into `σ²`, which only enters
/// through second moments.  Returns the sampler, a config whose noise fields
/// carry the *realized* levels, and a unit probe vector.
pub fn build_cell(
    dim: usize,
    kappa: f64,
    xi_kappa: f64,
    n: usize,
    b: usize,
    key: &StreamKey,
) -> Result<(HessianSampler, NeumannConfig, Vector)> {
    let l = 1.0;
    let mu = 1.0 / kappa;
    let budget = (xi_kappa / kappa) * b as f64 * l * l;
    let cap = (l - mu) / 2.0;
    let sigma_bar2 = (budget / 2.0).min(cap * cap);
    let sigma2 = budget - sigma_bar2;
    let sigma_bar = sigma_bar2.sqrt();

    let mut rng = key.rng();
    let unit_sym = |rng: &mut _| -> Result<Matrix> {
        let raw = normal_matrix(rng, dim, dim).symmetrized();
        let norm = spectral_norm(&raw, 1e-14)?;
        Ok(raw.scaled(1.0 / norm))
    };

    let (lo, hi) = (mu + sigma_bar, l - sigma_bar);
    let h_bar = if dim == 1 {
        Matrix::diag(&[lo])
    } else {
        let basis = sym_eigen(&normal_matrix(&mut rng, dim, dim).symmetrized(), 0.0)?.1;
        let gap = (hi - lo) / (dim - 1) as f64;
        let spectrum: Vec<f64> = (0..dim).map(|i| lo + gap * i as f64).collect();
        basis.matmul(&Matrix::diag(&spectrum)).matmul(&basis.transpose()).symmetrized()
    };

    let clients = if sigma_bar2 > 0.0 {
        let delta = unit_sym(&mut rng)?;
        let mut up = h_bar.clone();
        up.add_assign_scaled(sigma_bar, &delta);
        let mut down = h_bar;
        down.add_assign_scaled(-sigma_bar, &delta);
        vec![up, down]
    } else {
        vec![h_bar]
    };
    let noise = if sigma2 > 0.0 {
        let direction = unit_sym(&mut rng)?;
        NoiseModel::two_point(sigma2.sqrt(), &direction)?
    } else {
        NoiseModel::None
    };
    let sampler = HessianSampler::new(clients, noise)?;

    let raw = standard_normal_vector(&mut rng, dim);
    let v = raw.scaled(1.0 / raw.norm());

    let cfg = NeumannConfig {
        l,
        mu,
        n,
        b,
        sigma2: sampler.sigma2(),
        sigma_bar2: sampler.sigma_bar2(),
    };
    cfg.validate()?;
    Ok((sampler, cfg, v))
}

/// One cell of the bias/variance verification report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeumannCell {
    pub dim: usize,
    pub kappa: f64,
    pub xi_kappa: f64,
    pub n: usize,
    pub b: usize,
    pub trials: usize,
    /// Realized per-sample noise level of the cell instance.
    pub sigma2: f64,
    /// Realized inter-client level of the cell instance.
    pub sigma_bar2: f64,
    /// `‖mean estimate − H̄⁻¹v‖` over the Monte-Carlo trials.
    pub empirical_bias: f64,
    pub bias_bound: f64,
    /// Monte-Carlo allowance on the mean: `3·√(tr Cov/trials)` plus a floor.
    pub bias_slack: f64,
    pub bias_ok: bool,
    /// `tr` of the sample covariance, an unbiased estimate of `E‖s − Es‖²`.
    pub empirical_variance: f64,
    pub variance_bound_general: f64,
    /// Tighter certificate; `None` outside the small-noise regime.
    pub variance_bound_small_noise: Option<f64>,
    pub small_noise_regime: bool,
    /// Relative Monte-Carlo allowance on the variance estimate.
    pub variance_slack: f64,
    pub variance_ok: bool,
    pub pass: bool,
}

/// Bias/variance verification over the whole grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeumannGridReport {
    pub config: VerifyGridConfig,
    pub cells: Vec<NeumannCell>,
    pub all_pass: bool,
}

fn neumann_cell(
    grid: &VerifyGridConfig,
    dim: usize,
    kappa: f64,
    xi_kappa: f64,
    index: u64,
) -> Result<NeumannCell> {
    let key = StreamKey::root(grid.seed).descend(&[domain::NEUMANN, index]);
    let (sampler, cfg, v) = build_cell(dim, kappa, xi_kappa, grid.n, grid.b, &key.child(0))?;

    let report = monte_carlo_moments(
        |k| stochastic_ihvp_avg(&sampler, &cfg, &v, k).expect("cell arguments pre-validated"),
        grid.trials,
        &key.child(1),
    )?;

    let exact_inverse = solve_spd(&sampler.mean_hessian(), &v)?;
    let empirical_bias = (&report.mean - &exact_inverse).norm();
    let bias_cert = bias_bound(&cfg) * v.norm();
    let trace_cov = report.covariance.trace();
    let bias_slack = 3.0 * (trace_cov / grid.trials as f64).sqrt() + 1e-9;
    let bias_ok = empirical_bias <= bias_cert + bias_slack;

    let v2 = v.norm() * v.norm();
    let general = variance_bound_general(&cfg) * v2;
    let small = variance_bound_small_noise(&cfg).ok().map(|bound| bound * v2);
    let variance_slack = 3.0 * (2.0 / grid.trials as f64).sqrt() * trace_cov + 1e-12;
    let variance_ok = trace_cov <= general + variance_slack
        && small.is_none_or(|bound| trace_cov <= bound + variance_slack);

    Ok(NeumannCell {
        dim,
        kappa,
        xi_kappa,
        n: cfg.n,
        b: cfg.b,
        trials: grid.trials,
        sigma2: cfg.sigma2,
        sigma_bar2: cfg.sigma_bar2,
        empirical_bias,
        bias_bound: bias_cert,
        bias_slack,
        bias_ok,
        empirical_variance: trace_cov,
        variance_bound_general: general,
        variance_bound_small_noise: small,
        small_noise_regime: small.is_some(),
        variance_slack,
        variance_ok,
        pass: bias_ok && variance_ok,
    })
}

/// Runs the bias/variance verification over every grid cell.
pub fn verify_neumann_grid(config: &VerifyGridConfig) -> Result<NeumannGridReport> {
    config.validate()?;
    let cells: Vec<NeumannCell> = config
        .axes()
        .enumerate()
        .map(|(i, (dim, kappa, xk))| neumann_cell(config, dim, kappa, xk, i as u64))
        .collect::<Result<_>>()?;
    let all_pass = cells.iter().all(|c| c.pass);
    Ok(NeumannGridReport { config: config.clone(), cells, all_pass })
}

/// One cell of the covariance-ordering report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderCell {
    pub dim: usize,
    pub kappa: f64,
    pub xi_kappa: f64,
    #[serde(flatten)]
    pub report: EstOrderReport,
}

/// Covariance-ordering verification over the whole grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderGridReport {
    pub config: VerifyGridConfig,
    pub cells: Vec<OrderCell>,
    pub all_pass: bool,
}

/// Checks `Cov(rand) ⪰ Cov(avg)` on every grid cell.
pub fn verify_covariance_order_grid(config: &VerifyGridConfig) -> Result<OrderGridReport> {
    config.validate()?;
    let mut cells = Vec::new();
    for (i, (dim, kappa, xk)) in config.axes().enumerate() {
        let key = StreamKey::root(config.seed).descend(&[domain::NEUMANN, i as u64]);
        let (sampler, cfg, v) = build_cell(dim, kappa, xk, config.n, config.b, &key.child(0))?;
        let report = verify_est_order(&sampler, &cfg, &v, config.trials, &key.child(2))?;
        cells.push(OrderCell { dim, kappa, xi_kappa: xk, report });
    }
    let all_pass = cells.iter().all(|c| c.report.pass);
    Ok(OrderGridReport { config: config.clone(), cells, all_pass })
}

//! Stochastic truncated-Neumann estimation of inverse-Hessian-vector products.
//!
//! For a symmetric positive-definite `H` with eigenvalues in `[μ, L]`, the
//! Neumann series `H⁻¹ = (1/L)·Σ_{n≥0} (I − H/L)ⁿ` converges geometrically.
//! Truncating after `N+1` terms gives `HI[N]`, and replacing each factor by an
//! independently sampled minibatch Hessian gives two unbiased stochastic
//! estimators of `HI[N−1]·v`:
//!
//! * **averaged** ([`stochastic_ihvp_avg`]) — sums all partial products via a
//!   stable recursion (one fresh minibatch per series round);
//! * **random-index** ([`stochastic_ihvp_rand`]) — picks a uniformly random
//!   truncation index and rescales by `N`.
//!
//! The averaged form never has larger covariance than the random-index form;
//! [`crate::stats::verify_est_order`] checks that ordering empirically.
//! Closed-form bias/variance certificates for the averaged estimator are
//! provided by [`bias_bound`], [`variance_bound_general`] and
//! [`variance_bound_small_noise`].

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{spectral_norm, Matrix, NumericsError, Vector, SYMMETRY_TOL};
use crate::rng::StreamKey;

#[derive(Debug, Error)]
pub enum NeumannError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("small-noise variance bound requires Ξ·κ ≤ 1/4, got Ξ·κ = {xi_kappa:.6}")]
    RegimeViolation { xi_kappa: f64 },
    #[error("invalid sampler: {0}")]
    Sampler(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, NeumannError>;

/// Parameters of the stochastic Neumann estimators and their certificates.
///
/// `l`/`mu` are the eigenvalue bounds of the mean Hessian, `n` the number of
/// series rounds (the estimators output an estimate of `HI[n−1]·v`), `b` the
/// minibatch size per round, and `sigma2`/`sigma_bar2` the per-sample noise
/// and inter-client variance levels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NeumannConfig {
    pub l: f64,
    pub mu: f64,
    pub n: usize,
    pub b: usize,
    pub sigma2: f64,
    pub sigma_bar2: f64,
}

impl NeumannConfig {
    /// Condition number `κ = L/μ`.
    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }

    /// Relative noise level `Ξ = (σ² + σ̄²)/(B·L²)`.
    pub fn xi(&self) -> f64 {
        (self.sigma2 + self.sigma_bar2) / (self.b as f64 * self.l * self.l)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(NeumannError::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.l >= self.mu && self.l.is_finite()) {
            return Err(NeumannError::Config(format!(
                "need 0 < mu ≤ L, got mu = {}, L = {}",
                self.mu, self.l
            )));
        }
        if self.n == 0 {
            return Err(NeumannError::Config("series rounds n must be ≥ 1".into()));
        }
        if self.b == 0 {
            return Err(NeumannError::Config("batch size b must be ≥ 1".into()));
        }
        if !(self.sigma2 >= 0.0) || !(self.sigma_bar2 >= 0.0) {
            return Err(NeumannError::Config(format!(
                "noise levels must be ≥ 0, got sigma2 = {}, sigma_bar2 = {}",
                self.sigma2, self.sigma_bar2
            )));
        }
        Ok(())
    }
}

/// Per-sample Hessian noise attached to a [`HessianSampler`].
///
/// The two-point model adds `±σ·E` with a fixed symmetric direction `E` of
/// unit operator norm and an independent fair sign, so the per-sample
/// operator-norm second moment is exactly `σ²` — the bounds can then be
/// verified against a known noise scale instead of a loose upper estimate.
#[derive(Debug, Clone)]
pub enum NoiseModel {
    None,
    TwoPoint { sigma: f64, direction: Matrix },
}

impl NoiseModel {
    /// Two-point noise along an arbitrary symmetric direction; the direction
    /// is symmetrized and rescaled to unit operator norm.
    pub fn two_point(sigma: f64, direction: &Matrix) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(NeumannError::Sampler(format!("noise sigma must be ≥ 0, got {sigma}")));
        }
        let sym = direction.symmetrized();
        let norm = spectral_norm(&sym, 1e-14)?;
        if norm == 0.0 {
            return Err(NeumannError::Sampler("noise direction must be nonzero".into()));
        }
        Ok(NoiseModel::TwoPoint { sigma, direction: sym.scaled(1.0 / norm) })
    }

    /// Two-point noise `±σ·I`.
    pub fn isotropic(sigma: f64, dim: usize) -> Result<Self> {
        Self::two_point(sigma, &Matrix::identity(dim))
    }

    /// Exact per-sample operator-norm second moment σ² of this model.
    pub fn sigma2(&self) -> f64 {
        match self {
            NoiseModel::None => 0.0,
            NoiseModel::TwoPoint { sigma, .. } => sigma * sigma,
        }
    }
}

/// Finite population of per-client exact Hessians plus a per-sample noise
/// model.  A draw picks a client uniformly and perturbs its Hessian; the
/// draw is therefore an unbiased estimate of the mean Hessian.
#[derive(Debug, Clone)]
pub struct HessianSampler {
    clients: Vec<Matrix>,
    noise: NoiseModel,
    dim: usize,
}

impl HessianSampler {
    pub fn new(clients: Vec<Matrix>, noise: NoiseModel) -> Result<Self> {
        let first = clients
            .first()
            .ok_or_else(|| NeumannError::Sampler("need at least one client Hessian".into()))?;
        if !first.is_square() {
            return Err(NeumannError::Sampler("client Hessians must be square".into()));
        }
        let dim = first.rows();
        for (i, h) in clients.iter().enumerate() {
            if h.rows() != dim || h.cols() != dim {
                return Err(NeumannError::Sampler(format!(
                    "client {i} Hessian is {}x{}, expected {dim}x{dim}",
                    h.rows(),
                    h.cols()
                )));
            }
            if h.symmetry_deviation() > SYMMETRY_TOL {
                return Err(NeumannError::Sampler(format!("client {i} Hessian is not symmetric")));
            }
        }
        if let NoiseModel::TwoPoint { direction, .. } = &noise {
            if direction.rows() != dim {
                return Err(NeumannError::Sampler(format!(
                    "noise direction is {}x{}, expected {dim}x{dim}",
                    direction.rows(),
                    direction.cols()
                )));
            }
        }
        Ok(HessianSampler { clients, noise, dim })
    }

    /// Single-client sampler with no noise: every draw returns `h` exactly.
    pub fn exact(h: Matrix) -> Result<Self> {
        Self::new(vec![h], NoiseModel::None)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// Average of the per-client exact Hessians.
    pub fn mean_hessian(&self) -> Matrix {
        let mut mean = Matrix::zeros(self.dim, self.dim);
        for h in &self.clients {
            mean.add_assign_scaled(1.0 / self.clients.len() as f64, h);
        }
        mean
    }

    /// Exact inter-client variance level `σ̄² = max_i ‖Hᵢ − H̄‖²`.
    pub fn sigma_bar2(&self) -> f64 {
        let mean = self.mean_hessian();
        self.clients
            .iter()
            .map(|h| {
                spectral_norm(&h.sub(&mean), 1e-12).expect("client Hessian is square").powi(2)
            })
            .fold(0.0, f64::max)
    }

    /// Exact per-sample noise level σ² of the attached noise model.
    pub fn sigma2(&self) -> f64 {
        self.noise.sigma2()
    }

    /// One (client, noise) draw: uniform client, then additive perturbation.
    pub fn draw_one<R: Rng>(&self, rng: &mut R) -> Matrix {
        let i = rng.random_range(0..self.clients.len());
        match &self.noise {
            NoiseModel::None => self.clients[i].clone(),
            NoiseModel::TwoPoint { sigma, direction } => {
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                let mut h = self.clients[i].clone();
                h.add_assign_scaled(sign * sigma, direction);
                h
            }
        }
    }

    /// Minibatch Hessian: the average of `b` independent draws.
    pub fn draw_batch<R: Rng>(&self, b: usize, rng: &mut R) -> Matrix {
        assert!(b >= 1, "batch size must be ≥ 1");
        let mut acc = Matrix::zeros(self.dim, self.dim);
        for _ in 0..b {
            acc.add_assign_scaled(1.0 / b as f64, &self.draw_one(rng));
        }
        acc
    }
}

/// Exact truncated series applied to a vector:
/// `HI[N]·v = (1/L)·Σ_{n=0}^{N} (I − H/L)ⁿ v`.
///
/// Computed by the stable recursion `p₀ = v/L`, `pₙ = v/L + (I − H/L)pₙ₋₁`,
/// which never forms matrix powers.
pub fn truncated_neumann_exact(h: &Matrix, l: f64, v: &Vector, n: usize) -> Result<Vector> {
    if !h.is_square() {
        return Err(NumericsError::NotSquare { rows: h.rows(), cols: h.cols() }.into());
    }
    if h.cols() != v.len() {
        return Err(NumericsError::Dimension(format!(
            "Hessian is {}x{} but vector has length {}",
            h.rows(),
            h.cols(),
            v.len()
        ))
        .into());
    }
    let mut p = v.scaled(1.0 / l);
    for _ in 0..n {
        let hp = h.matvec(&p);
        let mut next = v.scaled(1.0 / l);
        next.add_scaled(1.0, &p);
        next.add_scaled(-1.0 / l, &hp);
        p = next;
    }
    Ok(p)
}

fn check_estimator_args(sampler: &HessianSampler, cfg: &NeumannConfig, v: &Vector) -> Result<()> {
    cfg.validate()?;
    if sampler.dim() != v.len() {
        return Err(NumericsError::Dimension(format!(
            "sampler dimension {} does not match vector length {}",
            sampler.dim(),
            v.len()
        ))
        .into());
    }
    Ok(())
}

/// Averaged stochastic estimator of `HI[N−1]·v` with `N = cfg.n` rounds.
///
/// Runs the recursion `p₀ = v/L`, `pₙ = v/L + (I − Ĥₙ/L)pₙ₋₁` for
/// `n = 1..N−1`, drawing one fresh minibatch Hessian `Ĥₙ` per round from
/// `key`'s stream, and returns `p_{N−1}` — equivalently the sum of all
/// partial products `(1/L)·Σ_{n=0}^{N−1} Q̂ₙ v`.  Minibatches are drawn
/// sequentially in round order, each batch as `b` (client, sign) pairs.
pub fn stochastic_ihvp_avg(
    sampler: &HessianSampler,
    cfg: &NeumannConfig,
    v: &Vector,
    key: &StreamKey,
) -> Result<Vector> {
    check_estimator_args(sampler, cfg, v)?;
    let mut rng = key.rng();
    let l = cfg.l;
    let mut p = v.scaled(1.0 / l);
    for _ in 1..cfg.n {
        let hhat = sampler.draw_batch(cfg.b, &mut rng);
        let hp = hhat.matvec(&p);
        let mut next = v.scaled(1.0 / l);
        next.add_scaled(1.0, &p);
        next.add_scaled(-1.0 / l, &hp);
        p = next;
    }
    Ok(p)
}

/// Random-index stochastic estimator of `HI[N−1]·v` with `N = cfg.n` rounds.
///
/// Draws `N′` uniform on `{0, …, N−1}`, then returns `(N/L)·Q̂_{N′} v` where
/// `Q̂_{N′} = Π_{i=1}^{N′}(I − Ĥᵢ/L)` uses `N′` fresh minibatch Hessians
/// (the empty product is the identity).  Unbiased for the same truncation as
/// [`stochastic_ihvp_avg`].
pub fn stochastic_ihvp_rand(
    sampler: &HessianSampler,
    cfg: &NeumannConfig,
    v: &Vector,
    key: &StreamKey,
) -> Result<Vector> {
    check_estimator_args(sampler, cfg, v)?;
    let mut rng = key.rng();
    let n_prime = rng.random_range(0..cfg.n);
    let l = cfg.l;
    let mut q = v.clone();
    for _ in 0..n_prime {
        let hhat = sampler.draw_batch(cfg.b, &mut rng);
        let hq = hhat.matvec(&q);
        q.add_scaled(-1.0 / l, &hq);
    }
    q.scale_in_place(cfg.n as f64 / l);
    Ok(q)
}

/// Bias certificate `(1/μ)(1 − 1/κ)^N` for the truncation `HI[N−1]`:
/// `‖HI[N−1]v − H⁻¹v‖ ≤ bias_bound·‖v‖`.
pub fn bias_bound(cfg: &NeumannConfig) -> f64 {
    (1.0 / cfg.mu) * (1.0 - 1.0 / cfg.kappa()).powi(cfg.n as i32)
}

/// Variance certificate `N²((1+Ξ)^N − 1)/L²`, valid at any noise level:
/// `E‖s_{N−1} − E s_{N−1}‖² ≤ variance_bound_general·‖v‖²`.
pub fn variance_bound_general(cfg: &NeumannConfig) -> f64 {
    let n = cfg.n as f64;
    n * n * ((1.0 + cfg.xi()).powi(cfg.n as i32) - 1.0) / (cfg.l * cfg.l)
}

/// Tighter variance certificate `8κ³Ξ/L²`, valid only when `Ξ·κ ≤ 1/4`;
/// outside that regime the call fails with
/// [`NeumannError::RegimeViolation`].
pub fn variance_bound_small_noise(cfg: &NeumannConfig) -> Result<f64> {
    let xi_kappa = cfg.xi() * cfg.kappa();
    if xi_kappa > 0.25 {
        return Err(NeumannError::RegimeViolation { xi_kappa });
    }
    Ok(8.0 * cfg.kappa().powi(3) * cfg.xi() / (cfg.l * cfg.l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::solve_spd;
    use crate::rng::{domain, StreamKey};
    use crate::stats::monte_carlo_moments;

    fn cfg(l: f64, mu: f64, n: usize, b: usize, sigma2: f64, sigma_bar2: f64) -> NeumannConfig {
        NeumannConfig { l, mu, n, b, sigma2, sigma_bar2 }
    }

    #[test]
    fn truncation_collapses_when_h_is_l_identity() {
        // I − H/L = 0, so every term past the first vanishes and HI[N]v = v/L.
        let h = Matrix::diag(&[2.0, 2.0]);
        let v = Vector::from_vec(vec![3.0, -1.0]);
        for n in [0, 1, 7] {
            let out = truncated_neumann_exact(&h, 2.0, &v, n).unwrap();
            assert_eq!(out.as_slice(), &[1.5, -0.5]);
        }
    }

    #[test]
    fn truncation_matches_hand_sum() {
        // H = diag(1,2), L = 2, N = 1: (1/2)[(1,1) + (1/2, 0)] = (0.75, 0.5).
        let h = Matrix::diag(&[1.0, 2.0]);
        let v = Vector::from_vec(vec![1.0, 1.0]);
        let out = truncated_neumann_exact(&h, 2.0, &v, 1).unwrap();
        assert!((out[0] - 0.75).abs() < 1e-15);
        assert!((out[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn deep_truncation_approaches_exact_inverse() {
        let h = Matrix::diag(&[1.0, 2.0]);
        let v = Vector::from_vec(vec![1.0, 1.0]);
        let truncated = truncated_neumann_exact(&h, 2.0, &v, 60).unwrap();
        let exact = solve_spd(&h, &v).unwrap();
        assert!((&truncated - &exact).norm() < 1e-9);
    }

    #[test]
    fn truncation_rejects_shape_mismatch() {
        let h = Matrix::diag(&[1.0, 2.0]);
        let v = Vector::from_vec(vec![1.0, 1.0, 1.0]);
        assert!(truncated_neumann_exact(&h, 2.0, &v, 3).is_err());
        assert!(truncated_neumann_exact(&Matrix::zeros(2, 3), 2.0, &v, 3).is_err());
    }

    #[test]
    fn avg_estimator_degenerates_without_noise() {
        let h = Matrix::diag(&[1.0, 1.7]);
        let sampler = HessianSampler::exact(h.clone()).unwrap();
        let v = Vector::from_vec(vec![0.3, -2.0]);
        let c = cfg(2.0, 1.0, 6, 1, 0.0, 0.0);
        let key = StreamKey::root(11).child(domain::NEUMANN);
        let got = stochastic_ihvp_avg(&sampler, &c, &v, &key).unwrap();
        let want = truncated_neumann_exact(&h, 2.0, &v, 5).unwrap();
        assert_eq!(got.as_slice(), want.as_slice());
    }

    #[test]
    fn avg_estimator_dim1_two_point_outcomes() {
        // H = 1, L = 2, N = 2, B = 1, noise ±0.5: the single minibatch is
        // 0.5 or 1.5, so p₁ = v/2 + (1 − Ĥ/2)(v/2) ∈ {0.875v, 0.625v}, and
        // the two outcomes average to HI[1]v = 0.75v.
        let sampler = HessianSampler::new(
            vec![Matrix::diag(&[1.0])],
            NoiseModel::isotropic(0.5, 1).unwrap(),
        )
        .unwrap();
        let v = Vector::from_vec(vec![2.0]);
        let c = cfg(2.0, 1.0, 2, 1, 0.25, 0.0);
        let mut seen = std::collections::BTreeSet::new();
        let base = StreamKey::root(5).child(domain::NEUMANN);
        for t in 0..200 {
            let out = stochastic_ihvp_avg(&sampler, &c, &v, &base.child(t)).unwrap();
            seen.insert(format!("{:.10}", out[0]));
        }
        let expect: std::collections::BTreeSet<String> =
            [format!("{:.10}", 0.875 * 2.0), format!("{:.10}", 0.625 * 2.0)].into_iter().collect();
        assert_eq!(seen, expect);
    }

    #[test]
    fn rand_estimator_forced_index_zero() {
        let sampler = HessianSampler::exact(Matrix::diag(&[1.0, 2.0])).unwrap();
        let v = Vector::from_vec(vec![4.0, -6.0]);
        let c = cfg(2.0, 1.0, 1, 1, 0.0, 0.0);
        let key = StreamKey::root(3).child(domain::NEUMANN);
        let out = stochastic_ihvp_rand(&sampler, &c, &v, &key).unwrap();
        assert_eq!(out.as_slice(), &[2.0, -3.0]);
    }

    #[test]
    fn rand_estimator_enumerates_two_outcomes() {
        // Zero noise, H = diag(1,2), L = 2, N = 2: N′ = 0 gives (2/2)v and
        // N′ = 1 gives (2/2)(I − H/2)v, i.e. (1,1) or (1/2,0).
        let sampler = HessianSampler::exact(Matrix::diag(&[1.0, 2.0])).unwrap();
        let v = Vector::from_vec(vec![1.0, 1.0]);
        let c = cfg(2.0, 1.0, 2, 1, 0.0, 0.0);
        let base = StreamKey::root(17).child(domain::NEUMANN);
        let mut seen = std::collections::BTreeSet::new();
        let mut counts = [0usize; 2];
        for t in 0..2000 {
            let out = stochastic_ihvp_rand(&sampler, &c, &v, &base.child(t)).unwrap();
            let tag = format!("{:.10},{:.10}", out[0], out[1]);
            if out[1] == 0.0 {
                counts[1] += 1;
            } else {
                counts[0] += 1;
            }
            seen.insert(tag);
        }
        let expect: std::collections::BTreeSet<String> =
            ["1.0000000000,1.0000000000".to_string(), "0.5000000000,0.0000000000".to_string()]
                .into_iter()
                .collect();
        assert_eq!(seen, expect);
        // Both branches occur with roughly equal frequency.
        assert!(counts[0] > 800 && counts[1] > 800);
    }

    #[test]
    fn estimators_are_unbiased_for_the_truncation() {
        // Monte Carlo with 1e5 trials; per-coordinate tolerance of 4 standard
        // errors against the exact truncation of the mean Hessian.
        let h1 = Matrix::from_rows(&[vec![1.4, 0.2], vec![0.2, 1.0]]).unwrap();
        let h2 = Matrix::from_rows(&[vec![1.0, -0.2], vec![-0.2, 1.6]]).unwrap();
        let sampler = HessianSampler::new(
            vec![h1, h2],
            NoiseModel::isotropic(0.3, 2).unwrap(),
        )
        .unwrap();
        let c = cfg(2.0, 0.5, 4, 2, 0.09, sampler.sigma_bar2());
        let v = Vector::from_vec(vec![1.0, -0.5]);
        let target = truncated_neumann_exact(&sampler.mean_hessian(), c.l, &v, c.n - 1).unwrap();

        let trials = 100_000;
        let base = StreamKey::root(23).child(domain::TRIAL);
        for (which, sub) in [("avg", 1u64), ("rand", 2u64)] {
            let sampler_ref = &sampler;
            let report = monte_carlo_moments(
                |k| {
                    if which == "avg" {
                        stochastic_ihvp_avg(sampler_ref, &c, &v, k).unwrap()
                    } else {
                        stochastic_ihvp_rand(sampler_ref, &c, &v, k).unwrap()
                    }
                },
                trials,
                &base.child(sub),
            )
            .unwrap();
            for i in 0..2 {
                let se = (report.covariance.get(i, i) / trials as f64).sqrt();
                let dev = (report.mean[i] - target[i]).abs();
                assert!(
                    dev <= 4.0 * se.max(1e-12),
                    "{which} estimator coordinate {i}: deviation {dev:.3e} vs 4se {:.3e}",
                    4.0 * se
                );
            }
        }
    }

    #[test]
    fn recursion_matches_explicit_product_form() {
        // Replay the estimator's exact draw sequence Ĥ₁..Ĥ_{N−1}, then
        // evaluate the sum of partial products directly.  Unrolling the
        // recursion pₙ = v/L + (I − Ĥₙ/L)pₙ₋₁ shows each term multiplies the
        // *most recent* factors outermost:
        //   p_{N−1} = (1/L) Σ_{j=0}^{N−1} (I−Ĥ_{N−1}/L)···(I−Ĥ_{N−j}/L) v.
        let h1 = Matrix::from_rows(&[vec![1.2, 0.1], vec![0.1, 0.9]]).unwrap();
        let h2 = Matrix::from_rows(&[vec![1.6, -0.3], vec![-0.3, 1.1]]).unwrap();
        let sampler =
            HessianSampler::new(vec![h1, h2], NoiseModel::isotropic(0.2, 2).unwrap()).unwrap();
        let c = cfg(2.0, 0.5, 5, 3, 0.04, sampler.sigma_bar2());
        let v = Vector::from_vec(vec![0.7, -1.3]);
        let key = StreamKey::root(99).child(domain::NEUMANN);

        let recursive = stochastic_ihvp_avg(&sampler, &c, &v, &key).unwrap();

        let mut rng = key.rng();
        let hats: Vec<Matrix> = (1..c.n).map(|_| sampler.draw_batch(c.b, &mut rng)).collect();
        let last = hats.len(); // N − 1
        let mut sum = Vector::zeros(v.len());
        for j in 0..=last {
            // (I−Ĥ_{last}/L)···(I−Ĥ_{last−j+1}/L) v, innermost factor first.
            let mut u = v.clone();
            for hat in hats.iter().take(last).skip(last - j) {
                let hu = hat.matvec(&u);
                u.add_scaled(-1.0 / c.l, &hu);
            }
            sum.add_scaled(1.0 / c.l, &u);
        }
        assert!((&recursive - &sum).norm() <= 1e-12, "diff {:.3e}", (&recursive - &sum).norm());
    }

    #[test]
    fn bound_formulas_match_hand_values() {
        assert!((bias_bound(&cfg(2.0, 1.0, 3, 1, 0.0, 0.0)) - 0.125).abs() < 1e-15);
        assert_eq!(bias_bound(&cfg(2.0, 2.0, 5, 1, 0.0, 0.0)), 0.0);
        assert!((bias_bound(&cfg(1.0, 0.5, 1, 1, 0.0, 0.0)) - 1.0).abs() < 1e-15);

        // Ξ = (σ² + σ̄²)/(B·L²) chosen to make each printed value exact.
        let c = cfg(1.0, 0.5, 2, 1, 0.5, 0.0); // Ξ = 0.5
        assert!((variance_bound_general(&c) - 5.0).abs() < 1e-12);
        let c = cfg(2.0, 1.0, 1, 1, 1.0, 0.0); // Ξ = 0.25
        assert!((variance_bound_general(&c) - 0.0625).abs() < 1e-12);
        assert_eq!(variance_bound_general(&cfg(1.0, 1.0, 4, 1, 0.0, 0.0)), 0.0);

        let c = cfg(1.0, 0.5, 2, 1, 0.125, 0.0); // κ = 2, Ξ = 1/8, Ξκ = 1/4
        assert!((variance_bound_small_noise(&c).unwrap() - 8.0).abs() < 1e-12);
        let c = cfg(2.0, 2.0, 2, 1, 4.0 * 0.25, 0.0); // κ = 1, Ξ = 0.25
        assert!((variance_bound_small_noise(&c).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(variance_bound_small_noise(&cfg(1.0, 1.0, 2, 1, 0.0, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn small_noise_bound_rejects_large_xi_kappa() {
        let c = cfg(1.0, 0.1, 2, 1, 0.5, 0.0); // κ = 10, Ξ = 0.5 → Ξκ = 5
        match variance_bound_small_noise(&c) {
            Err(NeumannError::RegimeViolation { xi_kappa }) => {
                assert!((xi_kappa - 5.0).abs() < 1e-12)
            }
            other => panic!("expected regime violation, got {other:?}"),
        }
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        assert!(cfg(2.0, 1.0, 3, 2, 0.1, 0.2).validate().is_ok());
        assert!(cfg(1.0, 2.0, 3, 2, 0.0, 0.0).validate().is_err()); // mu > L
        assert!(cfg(1.0, 0.0, 3, 2, 0.0, 0.0).validate().is_err()); // mu = 0
        assert!(cfg(1.0, 0.5, 0, 2, 0.0, 0.0).validate().is_err()); // n = 0
        assert!(cfg(1.0, 0.5, 3, 0, 0.0, 0.0).validate().is_err()); // b = 0
        assert!(cfg(1.0, 0.5, 3, 1, -0.1, 0.0).validate().is_err());
    }

    #[test]
    fn sampler_rejects_malformed_clients() {
        assert!(HessianSampler::new(vec![], NoiseModel::None).is_err());
        let asym = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(HessianSampler::new(vec![asym], NoiseModel::None).is_err());
        let mixed = vec![Matrix::identity(2), Matrix::identity(3)];
        assert!(HessianSampler::new(mixed, NoiseModel::None).is_err());
    }
}

//! Synthetic dataset generation and heterogeneity-controlled partitioning.
//!
//! Three generators live here:
//!
//! * [`heterogeneous_partition`] — splits a class-grouped sample pool across
//!   clients so that a fraction `q` of each client's share comes from "its
//!   own" class; `q = 0` is a uniform split, `q = 1` full class separation.
//! * [`gen_risk_averse_dataset`] — a regression dataset with a planted
//!   parameter for the risk-averse compositional family.
//! * [`gen_quadratic_bilevel`] — a federated quadratic bilevel instance whose
//!   client dispersion is controlled by a single knob `tau`, with the
//!   realized heterogeneity measured and recorded on the instance.
//!
//! Everything is a pure function of its seeds: fixed inputs reproduce the
//! same bytes on every platform.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::instances::{
    bilevel_to_msa, normal_matrix, BilevelClientData, InstanceError, QuadraticBilevelInstance,
    RiskAverseMcoInstance,
};
use crate::numerics::{sym_eigen, Matrix, NumericsError, Vector};
use crate::rng::{domain, standard_normal_vector, StreamKey};

/// Variance of the additive label noise `ζᵢ` in the risk-averse dataset.
pub const LABEL_NOISE_VARIANCE: f64 = 1e-3;

/// A spectrum projection that keeps less than this fraction of the requested
/// client perturbation (in Frobenius norm) is treated as a construction
/// failure: the band has absorbed the dispersion the caller asked for.
const BAND_ABSORPTION_LIMIT: f64 = 0.5;

/// Errors raised by the generators in this module.
#[derive(Debug, Error)]
pub enum DatagenError {
    /// A generator precondition does not hold (bad dimension, fraction out of
    /// range, infeasible split, …).
    #[error("invalid generator input: {0}")]
    Invalid(String),
    /// The dispersion `tau` is too large for the requested spectrum band:
    /// after projecting client `client` back into the band, only `kept`
    /// (fraction) of the drawn perturbation survived.
    #[error(
        "tau = {tau} does not fit the spectrum band [{lo}, {hi}]: \
         client {client} kept only {kept:.3} of the requested perturbation"
    )]
    BandProjection { tau: f64, lo: f64, hi: f64, client: usize, kept: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Instance(#[from] InstanceError),
}

pub type Result<T> = std::result::Result<T, DatagenError>;

// ---------------------------------------------------------------------------
// Heterogeneity-controlled partitioning
// ---------------------------------------------------------------------------

/// An assignment of sample indices to clients, together with the knobs that
/// produced it.
///
/// Invariants (guaranteed by [`heterogeneous_partition`] and preserved by
/// [`uniform_sub_split`]): every sample index appears in exactly one client,
/// and client sizes are all `⌊n/C⌋` with the remainder given to the lowest
/// client ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Partition {
    /// Sample indices per client.
    pub client_indices: Vec<Vec<usize>>,
    /// The own-class fraction the split was asked for.
    pub q: f64,
    /// Per-class sample counts of the pool that was split.
    pub class_counts: Vec<usize>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_indices.len()
    }

    pub fn num_samples(&self) -> usize {
        self.client_indices.iter().map(Vec::len).sum()
    }
}

/// Equal client shares of `n` samples: `⌊n/C⌋` each, remainder to the lowest
/// client ids.
fn client_targets(n: usize, clients: usize) -> Vec<usize> {
    let base = n / clients;
    let rem = n % clients;
    (0..clients).map(|i| base + usize::from(i < rem)).collect()
}

/// Splits a class-grouped sample pool across `clients` clients with
/// own-class fraction `q`.
///
/// Samples are identified by global indices grouped by class: class `0`
/// occupies `0..n₀`, class `1` occupies `n₀..n₀+n₁`, and so on.  The scheme
/// pairs client `i` with class `i` (so `class_counts.len()` must equal
/// `clients`) and runs in two stages:
///
/// 1. client `i` receives `min(⌈q·tᵢ⌉, nᵢ, tᵢ)` samples of class `i`, drawn
///    uniformly without replacement, where `tᵢ` is its equal share;
/// 2. every client is topped up to `tᵢ` by uniform draws without replacement
///    from the still-unassigned pool.
///
/// `q = 1` therefore separates classes exactly when `nᵢ = tᵢ`, and `q = 0`
/// reduces to a uniform split.
pub fn heterogeneous_partition<R: Rng>(
    class_counts: &[usize],
    clients: usize,
    q: f64,
    rng: &mut R,
) -> Result<Partition> {
    if clients == 0 {
        return Err(DatagenError::Invalid("need at least one client".into()));
    }
    if class_counts.len() != clients {
        return Err(DatagenError::Invalid(format!(
            "the first-stage scheme pairs client i with class i: got {} clients but {} classes",
            clients,
            class_counts.len()
        )));
    }
    if !q.is_finite() || !(0.0..=1.0).contains(&q) {
        return Err(DatagenError::Invalid(format!("q must lie in [0, 1], got {q}")));
    }
    let n: usize = class_counts.iter().sum();
    if n < clients {
        return Err(DatagenError::Invalid(format!(
            "infeasible split: {n} samples over {clients} clients"
        )));
    }

    let targets = client_targets(n, clients);

    // Shuffle each class block so both the q-stage subset and the leftover
    // pool are uniform draws.
    let mut blocks: Vec<Vec<usize>> = Vec::with_capacity(clients);
    let mut offset = 0;
    for &count in class_counts {
        let mut block: Vec<usize> = (offset..offset + count).collect();
        block.shuffle(rng);
        blocks.push(block);
        offset += count;
    }

    let mut client_indices: Vec<Vec<usize>> = Vec::with_capacity(clients);
    let mut pool: Vec<usize> = Vec::new();
    for (i, block) in blocks.iter().enumerate() {
        let own = ((q * targets[i] as f64).ceil() as usize).min(class_counts[i]).min(targets[i]);
        client_indices.push(block[..own].to_vec());
        pool.extend_from_slice(&block[own..]);
    }

    pool.shuffle(rng);
    let mut cursor = 0;
    for (cell, &target) in client_indices.iter_mut().zip(&targets) {
        let need = target - cell.len();
        cell.extend_from_slice(&pool[cursor..cursor + need]);
        cursor += need;
    }
    debug_assert_eq!(cursor, pool.len(), "pool fully dealt");

    Ok(Partition { client_indices, q, class_counts: class_counts.to_vec() })
}

/// Splits every client of `partition` into `factor` smaller clients by a
/// uniform deal of its samples.
///
/// Sub-clients are reordered by size (largest first) so the output satisfies
/// the same "equal sizes, remainder to the lowest ids" invariant as
/// [`heterogeneous_partition`].  The split changes bookkeeping only; `q` and
/// `class_counts` are carried over from the parent.
pub fn uniform_sub_split<R: Rng>(
    partition: &Partition,
    factor: usize,
    rng: &mut R,
) -> Result<Partition> {
    if factor == 0 {
        return Err(DatagenError::Invalid("sub-split factor must be positive".into()));
    }
    if let Some(small) = partition.client_indices.iter().position(|c| c.len() < factor) {
        return Err(DatagenError::Invalid(format!(
            "client {small} has {} samples, fewer than the sub-split factor {factor}",
            partition.client_indices[small].len()
        )));
    }
    let mut split: Vec<Vec<usize>> = Vec::with_capacity(partition.num_clients() * factor);
    for cell in &partition.client_indices {
        let mut shuffled = cell.clone();
        shuffled.shuffle(rng);
        let targets = client_targets(shuffled.len(), factor);
        let mut cursor = 0;
        for target in targets {
            split.push(shuffled[cursor..cursor + target].to_vec());
            cursor += target;
        }
    }
    split.sort_by_key(|cell| std::cmp::Reverse(cell.len()));
    Ok(Partition {
        client_indices: split,
        q: partition.q,
        class_counts: partition.class_counts.clone(),
    })
}

// ---------------------------------------------------------------------------
// Risk-averse regression dataset
// ---------------------------------------------------------------------------

/// A regression dataset with a planted parameter, ready to be combined with a
/// [`Partition`] into a [`RiskAverseMcoInstance`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskAverseDataset {
    pub features: Vec<Vector>,
    pub labels: Vec<f64>,
    /// The parameter the labels were generated from.
    pub x_star: Vector,
}

impl RiskAverseDataset {
    pub fn num_samples(&self) -> usize {
        self.features.len()
    }

    pub fn dim(&self) -> usize {
        self.x_star.len()
    }

    /// Combines the dataset with a partition and the risk parameters into a
    /// full problem instance (squared hinge by default; see
    /// [`RiskAverseMcoInstance::squared_hinge`]).
    pub fn into_instance(
        self,
        partition: &Partition,
        lambda: f64,
        delta: f64,
        squared_hinge: bool,
    ) -> RiskAverseMcoInstance {
        RiskAverseMcoInstance {
            features: self.features,
            labels: self.labels,
            lambda,
            delta,
            partition: partition.client_indices.clone(),
            squared_hinge,
            x_star: Some(self.x_star),
        }
    }
}

/// Generates `n` feature/label pairs in dimension `d` with a planted
/// parameter.
///
/// The parameter is `x* ~ N(0, I_d)` under `x_star_seed`.  Under `data_seed`
/// a mixing matrix `M` with standard normal entries is drawn once, features
/// are `aᵢ = M gᵢ / √d ~ N(0, M Mᵀ / d)`, and labels are
/// `bᵢ = (aᵢᵀ x*)² + ζᵢ` with `ζᵢ ~ N(0, 1e-3)`.  With `zero_noise` the
/// labels are exactly `(aᵢᵀ x*)²`, so the residual at `x*` vanishes for every
/// sample; the feature draw is unchanged.
///
/// The two seeds address disjoint stream paths, so they may be equal without
/// coupling the parameter to the data.
pub fn gen_risk_averse_dataset(
    d: usize,
    n: usize,
    x_star_seed: u64,
    data_seed: u64,
    zero_noise: bool,
) -> Result<RiskAverseDataset> {
    if d == 0 || n == 0 {
        return Err(DatagenError::Invalid(format!(
            "need positive dimension and sample count, got d = {d}, n = {n}"
        )));
    }
    let mut x_rng = StreamKey::root(x_star_seed).descend(&[domain::DATA, 0]).rng();
    let x_star = standard_normal_vector(&mut x_rng, d);

    let mut rng = StreamKey::root(data_seed).descend(&[domain::DATA, 1]).rng();
    let mix = normal_matrix(&mut rng, d, d).scaled(1.0 / (d as f64).sqrt());
    let features: Vec<Vector> =
        (0..n).map(|_| mix.matvec(&standard_normal_vector(&mut rng, d))).collect();
    let noise = standard_normal_vector(&mut rng, n);

    let noise_std = LABEL_NOISE_VARIANCE.sqrt();
    let labels: Vec<f64> = features
        .iter()
        .zip(noise.as_slice())
        .map(|(a, z)| {
            let t = a.dot(&x_star);
            if zero_noise { t * t } else { t * t + noise_std * z }
        })
        .collect();

    Ok(RiskAverseDataset { features, labels, x_star })
}

/// Renders a dataset as CSV with header `a_1,…,a_d,b`, one row per sample,
/// `\n` line endings, and shortest round-trip float formatting.
pub fn dataset_to_csv(features: &[Vector], labels: &[f64]) -> String {
    assert_eq!(features.len(), labels.len(), "dataset_to_csv: length mismatch");
    let d = features.first().map_or(0, Vector::len);
    let mut out = String::new();
    for j in 1..=d {
        let _ = write!(out, "a_{j},");
    }
    out.push_str("b\n");
    for (a, b) in features.iter().zip(labels) {
        for v in a.as_slice() {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{b}");
    }
    out
}

/// Parses the CSV produced by [`dataset_to_csv`] back into feature/label
/// pairs (bitwise, thanks to round-trip float formatting).
pub fn dataset_from_csv(text: &str) -> Result<(Vec<Vector>, Vec<f64>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| DatagenError::Invalid("empty dataset CSV".into()))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.last() != Some(&"b") || columns.len() < 2 {
        return Err(DatagenError::Invalid(format!("unexpected dataset header: {header}")));
    }
    let d = columns.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut values = Vec::with_capacity(d + 1);
        for field in line.split(',') {
            let v: f64 = field.parse().map_err(|_| {
                DatagenError::Invalid(format!("row {}: bad float {field:?}", row + 1))
            })?;
            values.push(v);
        }
        if values.len() != d + 1 {
            return Err(DatagenError::Invalid(format!(
                "row {}: expected {} fields, got {}",
                row + 1,
                d + 1,
                values.len()
            )));
        }
        let label = values.pop().expect("row has at least one field");
        features.push(Vector::from_vec(values));
        labels.push(label);
    }
    Ok((features, labels))
}

// ---------------------------------------------------------------------------
// Federated quadratic bilevel instances
// ---------------------------------------------------------------------------

/// Parameters for [`gen_quadratic_bilevel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilevelGenSpec {
    /// Number of clients `M`.
    pub clients: usize,
    /// Outer dimension `d₁`.
    pub outer_dim: usize,
    /// Inner dimension `d₂`.
    pub inner_dim: usize,
    /// Client dispersion knob; `0` makes all clients identical.
    pub tau: f64,
    /// Lower edge of the inner curvature spectrum (strong convexity).
    pub mu_g: f64,
    /// Upper edge of the inner curvature spectrum (smoothness).
    pub l_g: f64,
    pub seed: u64,
    /// Drop the direct outer term (`Dₘ = 0`), so the hypergradient is purely
    /// indirect.  Note the outer minimizer is then well posed only when
    /// `inner_dim ≥ outer_dim`.
    #[serde(default)]
    pub pure_indirect: bool,
    /// Gradient noise scale stored on the instance.
    #[serde(default)]
    pub sigma_f: f64,
    /// Hessian noise scale stored on the instance.
    #[serde(default)]
    pub sigma_g: f64,
}

impl BilevelGenSpec {
    fn validate(&self) -> Result<()> {
        if self.clients == 0 || self.outer_dim == 0 || self.inner_dim == 0 {
            return Err(DatagenError::Invalid(format!(
                "need positive clients and dimensions, got M = {}, d1 = {}, d2 = {}",
                self.clients, self.outer_dim, self.inner_dim
            )));
        }
        if !(self.mu_g > 0.0 && self.mu_g <= self.l_g && self.l_g.is_finite()) {
            return Err(DatagenError::Invalid(format!(
                "need 0 < mu_g <= l_g, got mu_g = {}, l_g = {}",
                self.mu_g, self.l_g
            )));
        }
        for (name, v) in [("tau", self.tau), ("sigma_f", self.sigma_f), ("sigma_g", self.sigma_g)]
        {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DatagenError::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Projects a symmetric matrix onto the set with spectrum in `[lo, hi]` by
/// clamping its eigenvalues.
fn clamp_spectrum(a: &Matrix, lo: f64, hi: f64) -> std::result::Result<Matrix, NumericsError> {
    let (values, basis) = sym_eigen(a, 0.0)?;
    let clamped: Vec<f64> = values.iter().map(|&v| v.clamp(lo, hi)).collect();
    Ok(basis.matmul(&Matrix::diag(&clamped)).matmul(&basis.transpose()).symmetrized())
}

/// Generates a federated quadratic bilevel instance with dispersion `tau`.
///
/// A base inner curvature `Ā` is drawn with a random orthonormal basis and an
/// evenly spaced spectrum filling `[mu_g, l_g]`; base cross/shift/outer data
/// are drawn once.  Each client's matrices are the base plus `tau` times a
/// zero-mean perturbation (symmetric where symmetry is required), with the
/// inner curvature projected back onto the `[mu_g, l_g]` band and the outer
/// curvature onto the positive semidefinite cone.  If a projection keeps less
/// than half of a client's drawn perturbation, `tau` does not fit the band
/// and construction fails.
///
/// The per-client draws do not depend on `tau`, so for a fixed seed the
/// realized heterogeneity recorded in
/// [`QuadraticBilevelInstance::measured_upsilon`] scales monotonically with
/// it.  With `tau = 0` (or a single client) the clients are exact copies and
/// the recorded value is zero.
pub fn gen_quadratic_bilevel(spec: &BilevelGenSpec) -> Result<QuadraticBilevelInstance> {
    spec.validate()?;
    let (d1, d2) = (spec.outer_dim, spec.inner_dim);
    let mut rng = StreamKey::root(spec.seed).descend(&[domain::DATA, 2]).rng();

    let basis = {
        let seed_sym = normal_matrix(&mut rng, d2, d2).symmetrized();
        sym_eigen(&seed_sym, 0.0)?.1
    };
    let spectrum: Vec<f64> = if d2 == 1 {
        vec![spec.mu_g]
    } else {
        let gap = (spec.l_g - spec.mu_g) / (d2 - 1) as f64;
        (0..d2).map(|i| spec.mu_g + gap * i as f64).collect()
    };
    let a_bar = basis.matmul(&Matrix::diag(&spectrum)).matmul(&basis.transpose()).symmetrized();

    let psd = |rng: &mut _, d: usize, scale: f64, shift: f64| {
        let h = normal_matrix(rng, d, d);
        let mut p = h.matmul(&h.transpose()).scaled(scale / d as f64);
        p.add_assign_scaled(shift, &Matrix::identity(d));
        p.symmetrized()
    };
    let b_bar = normal_matrix(&mut rng, d2, d1);
    let c_bar = standard_normal_vector(&mut rng, d2);
    let outer_quad_bar = psd(&mut rng, d2, 1.0, 0.1);
    let target_bar = standard_normal_vector(&mut rng, d2);
    let direct_draw = psd(&mut rng, d1, 0.3, 0.05);
    let direct_bar =
        if spec.pure_indirect { Matrix::zeros(d1, d1) } else { direct_draw };

    let mut clients = Vec::with_capacity(spec.clients);
    for m in 0..spec.clients {
        // Always drawn, so the stream does not depend on tau.
        let inner_pert = normal_matrix(&mut rng, d2, d2).symmetrized();
        let cross_pert = normal_matrix(&mut rng, d2, d1);
        let shift_pert = standard_normal_vector(&mut rng, d2);
        let outer_pert = normal_matrix(&mut rng, d2, d2).symmetrized();
        let target_pert = standard_normal_vector(&mut rng, d2);
        let direct_pert = normal_matrix(&mut rng, d1, d1).symmetrized();

        if spec.tau == 0.0 {
            clients.push(BilevelClientData {
                inner_quad: a_bar.clone(),
                inner_cross: b_bar.clone(),
                inner_shift: c_bar.clone(),
                outer_quad: outer_quad_bar.clone(),
                outer_target: target_bar.clone(),
                outer_direct: direct_bar.clone(),
            });
            continue;
        }

        let mut inner_raw = a_bar.clone();
        inner_raw.add_assign_scaled(spec.tau, &inner_pert);
        let inner_quad = clamp_spectrum(&inner_raw, spec.mu_g, spec.l_g)?;
        let requested = spec.tau * inner_pert.frobenius_norm();
        let kept = inner_quad.sub(&a_bar).frobenius_norm();
        if requested > 0.0 && kept < BAND_ABSORPTION_LIMIT * requested {
            return Err(DatagenError::BandProjection {
                tau: spec.tau,
                lo: spec.mu_g,
                hi: spec.l_g,
                client: m,
                kept: kept / requested,
            });
        }

        let mut outer_raw = outer_quad_bar.clone();
        outer_raw.add_assign_scaled(spec.tau, &outer_pert);
        let outer_quad = clamp_spectrum(&outer_raw, 0.0, f64::INFINITY)?;

        let mut inner_cross = b_bar.clone();
        inner_cross.add_assign_scaled(spec.tau, &cross_pert);
        let mut inner_shift = c_bar.clone();
        inner_shift.add_scaled(spec.tau, &shift_pert);
        let mut outer_target = target_bar.clone();
        outer_target.add_scaled(spec.tau, &target_pert);
        let outer_direct = if spec.pure_indirect {
            Matrix::zeros(d1, d1)
        } else {
            let mut d = direct_bar.clone();
            d.add_assign_scaled(spec.tau, &direct_pert);
            d
        };

        clients.push(BilevelClientData {
            inner_quad,
            inner_cross,
            inner_shift,
            outer_quad,
            outer_target,
            outer_direct,
        });
    }

    let mut instance = QuadraticBilevelInstance {
        clients,
        sigma_f: spec.sigma_f,
        sigma_g: spec.sigma_g,
        tau: spec.tau,
        measured_upsilon: None,
        initial_x: None,
    };
    // With tau = 0 (or a single client) every client equals the population
    // mean by construction, so the deviation is identically zero; measuring
    // would only add round-off.
    let measured = if spec.tau == 0.0 || spec.clients == 1 {
        0.0
    } else {
        bilevel_to_msa(instance.clone())?.measured_upsilon()?
    };
    instance.measured_upsilon = Some(measured);
    Ok(instance)
}

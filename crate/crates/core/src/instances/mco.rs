//! Three-level risk-averse compositional problem over a regression dataset.
//!
//! Sample `i` carries a feature vector `aᵢ` and a scalar label `bᵢ`, with the
//! per-sample loss `U(x; i) = (bᵢ − (aᵢᵀx)²)²`.  The objective penalizes both
//! the mean loss and its upward dispersion:
//!
//! ```text
//! F(x) = mean U + λ·√(mean hinge(U − mean U) + δ),
//! ```
//!
//! where `hinge(t) = max(0, t)²` by default (a flag switches to the plain
//! hinge) and `δ > 0` keeps the square root smooth.  Writing the three
//! levels as
//!
//! ```text
//! f⁰(x) = (x, mean U)        ∈ ℝᵈ⁺¹
//! f¹(x̃, y) = (y, mean hinge(U(x̃) − y)) ∈ ℝ²
//! f²(u, v) = u + λ√(v + δ)   ∈ ℝ
//! ```
//!
//! gives `F = f² ∘ f¹ ∘ f⁰`.  [`mco_to_msa`] tracks the two inner values by
//! sequence variables `z¹, z²` with residual mappings
//! `S^{m,n}(zⁿ⁻¹, zⁿ) = zⁿ − f^{m,n−1}(zⁿ⁻¹)` (`z⁰ ≡ x`), and the outer
//! mapping is the Jacobian chain
//! `Pᵐ(x, Z) = ∇f^{m,0}(x)·∇f^{m,1}(z¹)·∇f^{m,2}(z²)`, evaluated right to
//! left as Jacobian-transpose–vector products.
//!
//! Client `m` owns the samples listed in its partition cell; its stochastic
//! oracles replace the client mean by a minibatch mean (indices drawn
//! uniformly with replacement from the cell), with one independent minibatch
//! per level so that the product estimator stays unbiased.  Exact mappings
//! and fixed points use the full dataset.

use serde::{Deserialize, Serialize};

use super::{InstanceError, Result};
use crate::msa::MsaProblem;
use crate::numerics::Vector;
use crate::rng::{standard_normal_vector, uniform_indices, SampleToken, StreamKey};

/// Below this value of `v + δ` the square root is flattened: constant value,
/// zero derivative.  Keeps trajectories finite if a sequence variable strays
/// far below its tracked mean.
const SQRT_FLOOR: f64 = 1e-12;

/// Substream tags: one independent minibatch per level inside `P`, and one
/// per residual mapping.
const TAG_P_LEVEL0: u64 = 0;
const TAG_P_LEVEL1: u64 = 1;
const TAG_S_BASE: u64 = 10;

fn default_true() -> bool {
    true
}

/// Serializable description of the dataset, the risk functional, and the
/// client partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskAverseMcoInstance {
    /// Feature vectors `aᵢ`, all of one dimension `d`.
    pub features: Vec<Vector>,
    /// Labels `bᵢ`.
    pub labels: Vec<f64>,
    /// Risk weight `λ ≥ 0`.
    pub lambda: f64,
    /// Smoothing `δ > 0` under the square root.
    pub delta: f64,
    /// Per-client lists of sample indices.
    pub partition: Vec<Vec<usize>>,
    /// Use `max(0, ·)²` (default) or the plain `max(0, ·)` in the dispersion
    /// level.
    #[serde(default = "default_true")]
    pub squared_hinge: bool,
    /// Planted generating solution, if known; only used for distance
    /// reporting.
    #[serde(default)]
    pub x_star: Option<Vector>,
}

/// A validated risk-averse instance, usable as a two-sequence
/// [`MsaProblem`].
pub struct RiskAverseProblem {
    instance: RiskAverseMcoInstance,
    dim: usize,
    /// `0..n`, the index set of the full dataset.
    all: Vec<usize>,
}

/// Validates the instance and returns the tracking formulation.
pub fn mco_to_msa(instance: RiskAverseMcoInstance) -> Result<RiskAverseProblem> {
    let n = instance.features.len();
    if n == 0 {
        return Err(InstanceError::Invalid("empty dataset".into()));
    }
    let dim = instance.features[0].len();
    if dim == 0 {
        return Err(InstanceError::Invalid("zero-dimensional features".into()));
    }
    if instance.features.iter().any(|a| a.len() != dim) {
        return Err(InstanceError::Invalid("feature dimensions differ".into()));
    }
    if instance.labels.len() != n {
        return Err(InstanceError::Invalid(format!(
            "{} labels for {n} feature vectors",
            instance.labels.len()
        )));
    }
    if !(instance.lambda.is_finite() && instance.lambda >= 0.0) {
        return Err(InstanceError::Invalid(format!("risk weight {} invalid", instance.lambda)));
    }
    if !(instance.delta.is_finite() && instance.delta > 0.0) {
        return Err(InstanceError::Invalid(format!("smoothing {} must be > 0", instance.delta)));
    }
    if instance.partition.is_empty() {
        return Err(InstanceError::Invalid("no clients in partition".into()));
    }
    for (m, cell) in instance.partition.iter().enumerate() {
        if cell.is_empty() {
            return Err(InstanceError::Invalid(format!("client {m} owns no samples")));
        }
        if let Some(&bad) = cell.iter().find(|&&i| i >= n) {
            return Err(InstanceError::Invalid(format!(
                "client {m} references sample {bad}, dataset has {n}"
            )));
        }
    }
    if let Some(xs) = &instance.x_star {
        if xs.len() != dim {
            return Err(InstanceError::Invalid(format!(
                "x_star has length {}, features have {dim}",
                xs.len()
            )));
        }
    }
    Ok(RiskAverseProblem { instance, dim, all: (0..n).collect() })
}

/// Square root with the flat extension below [`SQRT_FLOOR`]; returns the
/// value and its derivative.
fn smooth_sqrt(t: f64) -> (f64, f64) {
    if t >= SQRT_FLOOR {
        let r = t.sqrt();
        (r, 0.5 / r)
    } else {
        (SQRT_FLOOR.sqrt(), 0.0)
    }
}

impl RiskAverseProblem {
    pub fn instance(&self) -> &RiskAverseMcoInstance {
        &self.instance
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_samples(&self) -> usize {
        self.all.len()
    }

    /// `U(x; i)` and the scalar `u'` with `∇U(x; i) = u'·aᵢ`.
    fn loss_parts(&self, i: usize, x: &Vector) -> (f64, f64) {
        let t = self.instance.features[i].dot(x);
        let r = self.instance.labels[i] - t * t;
        (r * r, -4.0 * t * r)
    }

    /// `hinge(U − y)` and its derivatives `(∂/∂U, ∂/∂y)`; the two are always
    /// negatives of each other.
    fn hinge_parts(&self, u: f64, y: f64) -> (f64, f64) {
        let t = u - y;
        if t <= 0.0 {
            (0.0, 0.0)
        } else if self.instance.squared_hinge {
            (t * t, 2.0 * t)
        } else {
            (t, 1.0)
        }
    }

    /// `f⁰` over an index set: `(x, mean U)`.
    fn level0(&self, idxs: &[usize], x: &Vector) -> Vector {
        let mean: f64 =
            idxs.iter().map(|&i| self.loss_parts(i, x).0).sum::<f64>() / idxs.len() as f64;
        Vector::concat(&[x, &Vector::from_vec(vec![mean])])
    }

    /// `f¹` over an index set: `(y, mean hinge(U(x̃) − y))`.
    fn level1(&self, idxs: &[usize], z1: &Vector) -> Vector {
        let x = z1.slice(0, self.dim);
        let y = z1[self.dim];
        let mean: f64 = idxs
            .iter()
            .map(|&i| self.hinge_parts(self.loss_parts(i, &x).0, y).0)
            .sum::<f64>()
            / idxs.len() as f64;
        Vector::from_vec(vec![y, mean])
    }

    /// `f²(u, v) = u + λ√(v + δ)`.
    fn level2(&self, z2: &Vector) -> f64 {
        z2[0] + self.instance.lambda * smooth_sqrt(z2[1] + self.instance.delta).0
    }

    /// `(∇f⁰)ᵀg` over an index set: `g_x + g_y·mean ∇U(x)`.
    fn jt_level0(&self, idxs: &[usize], x: &Vector, g: &Vector) -> Vector {
        let mut out = g.slice(0, self.dim);
        let g_y = g[self.dim];
        let w = g_y / idxs.len() as f64;
        for &i in idxs {
            let (_, du) = self.loss_parts(i, x);
            out.add_scaled(w * du, &self.instance.features[i]);
        }
        out
    }

    /// `(∇f¹)ᵀc` over an index set, at `z¹ = (x̃, y)`.
    fn jt_level1(&self, idxs: &[usize], z1: &Vector, c: &Vector) -> Vector {
        let x = z1.slice(0, self.dim);
        let y = z1[self.dim];
        let mut grad_x = Vector::zeros(self.dim);
        let w = c[1] / idxs.len() as f64;
        let mut dy_sum = 0.0;
        for &i in idxs {
            let (u, du) = self.loss_parts(i, &x);
            let (_, dh) = self.hinge_parts(u, y);
            grad_x.add_scaled(w * dh * du, &self.instance.features[i]);
            dy_sum += dh;
        }
        Vector::concat(&[&grad_x, &Vector::from_vec(vec![c[0] - w * dy_sum])])
    }

    /// `(∇f²)ᵀc` at `z² = (u, v)`.
    fn jt_level2(&self, z2: &Vector, c: f64) -> Vector {
        let (_, dv) = smooth_sqrt(z2[1] + self.instance.delta);
        Vector::from_vec(vec![c, c * self.instance.lambda * dv])
    }

    /// Chain `(∇f⁰)ᵀ(∇f¹)ᵀ(∇f²)ᵀ·1` with one index set per data-dependent
    /// level.
    fn chain(&self, idxs0: &[usize], idxs1: &[usize], x: &Vector, z: &[Vector]) -> Vector {
        let g2 = self.jt_level2(&z[1], 1.0);
        let g1 = self.jt_level1(idxs1, &z[0], &g2);
        self.jt_level0(idxs0, x, &g1)
    }

    /// Minibatch of client-owned sample indices (uniform with replacement).
    fn minibatch(&self, client: usize, sample: &SampleToken, tag: u64, batch: usize) -> Vec<usize> {
        let cell = &self.instance.partition[client];
        uniform_indices(&mut sample.substream(tag).rng(), cell.len(), batch)
            .into_iter()
            .map(|j| cell[j])
            .collect()
    }

    /// The full composed objective `F(x)`, evaluated on the whole dataset.
    pub fn reduced_objective(&self, x: &Vector) -> f64 {
        let z1 = self.level0(&self.all, x);
        let z2 = self.level1(&self.all, &z1);
        self.level2(&z2)
    }
}

impl MsaProblem for RiskAverseProblem {
    fn num_sequences(&self) -> usize {
        2
    }

    fn num_clients(&self) -> usize {
        self.instance.partition.len()
    }

    fn dims(&self) -> Vec<usize> {
        vec![self.dim, self.dim + 1, 2]
    }

    fn oracle_p(
        &self,
        client: usize,
        x: &Vector,
        z: &[Vector],
        sample: &SampleToken,
        batch: usize,
    ) -> Vector {
        let idxs0 = self.minibatch(client, sample, TAG_P_LEVEL0, batch);
        let idxs1 = self.minibatch(client, sample, TAG_P_LEVEL1, batch);
        self.chain(&idxs0, &idxs1, x, z)
    }

    fn oracle_s(
        &self,
        client: usize,
        level: usize,
        z_prev: &Vector,
        z_cur: &Vector,
        sample: &SampleToken,
        batch: usize,
    ) -> Vector {
        let idxs = self.minibatch(client, sample, TAG_S_BASE + level as u64, batch);
        let value = match level {
            1 => self.level0(&idxs, z_prev),
            2 => self.level1(&idxs, z_prev),
            _ => panic!("risk-averse problems have exactly two inner sequences"),
        };
        let mut s = z_cur.clone();
        s.add_scaled(-1.0, &value);
        s
    }

    fn exact_p(&self, x: &Vector, z: &[Vector]) -> Option<Vector> {
        Some(self.chain(&self.all, &self.all, x, z))
    }

    fn fixed_point(&self, level: usize, z_prev: &Vector) -> Option<Vector> {
        Some(match level {
            1 => self.level0(&self.all, z_prev),
            2 => self.level1(&self.all, z_prev),
            _ => panic!("risk-averse problems have exactly two inner sequences"),
        })
    }

    fn x_star(&self) -> Option<Vector> {
        self.instance.x_star.clone()
    }

    fn initial_point(&self, key: &StreamKey) -> (Vector, Vec<Vector>) {
        // The loss is even in x, so ±x* are both global minima and the origin
        // is a stationary saddle.  A cold N(0, I) start therefore converges to
        // whichever sign copy is nearer (or stalls at the saddle), which makes
        // ‖x − x*‖ meaningless as a progress measure.  When the planted
        // solution is known we start inside its basin: x₀ = x* + ½·N(0, I).
        // The sequence variables start tracking-consistent via a population
        // forward pass.
        let draw = standard_normal_vector(&mut key.rng(), self.dim);
        let x0 = match &self.instance.x_star {
            Some(x_star) => x_star + &draw.scaled(0.5),
            None => draw,
        };
        let z1 = self.level0(&self.all, &x0);
        let z2 = self.level1(&self.all, &z1);
        (x0, vec![z1, z2])
    }
}

//! Federated multi-sequence stochastic approximation engine.
//!
//! A problem supplies one outer mapping `P` and `N` inner mappings `Sⁿ`
//! through per-client stochastic oracles; the goal is a joint root
//! (`P = 0`, all `Sⁿ = 0`).  Each round the server:
//!
//! 1. has every client evaluate its mappings at the current and previous
//!    iterates with one shared sample, forming momentum-corrected directions
//!    `hᵐ = pᵐ(cur; ξ) + (1−ρ)(h_prev − pᵐ(prev; ξ))` that are averaged in
//!    ascending client order;
//! 2. picks one client uniformly at random and runs `K` local steps there,
//!    correcting the directions recursively (`h ← p(cur; ξ) + h − p(prev; ξ)`
//!    with a fresh shared sample per step) while stepping
//!    `x ← x − α·h`, `zⁿ ← zⁿ − βₙ·qⁿ`;
//! 3. adopts the client's final local iterate as the new global iterate.
//!
//! Round 0 always uses `ρ = 1` and a single local step, with a larger
//! warm-start batch for the fresh direction estimates.  Progress is measured
//! by `‖P(x)‖² + Σₙ‖zⁿ − zⁿ*(zⁿ⁻¹)‖²`, where the first term evaluates the
//! population mapping along the chain of exact inner fixed points.
//!
//! Every stochastic quantity derives from `(seed, logical path)` stream keys,
//! so trajectories are bitwise identical across reruns and thread counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Vector;
use crate::rng::{domain, SampleToken, StreamKey};

#[derive(Debug, Error)]
pub enum MsaError {
    #[error("invalid hyperparameters: {0}")]
    Config(String),
    #[error("divergence at round {round}: {what} became non-finite")]
    Divergence { round: usize, what: String },
    #[error("unsupported problem for this algorithm: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, MsaError>;

/// A federated multi-sequence root-finding problem.
///
/// Implementations expose `M` per-client stochastic oracles for the outer
/// mapping `P` and the inner mappings `Sⁿ` (`n = 1..N`), plus exact
/// population quantities for metrics where available.  Oracles must be pure
/// functions of `(arguments, sample token)`: evaluating twice with the same
/// token uses the same underlying sample, which is what makes the momentum
/// and correction differences cancel exactly at coincident points.
pub trait MsaProblem: Sync {
    /// Number of inner sequences `N`.
    fn num_sequences(&self) -> usize;

    /// Number of clients `M`.
    fn num_clients(&self) -> usize;

    /// Dimensions `[dim x, dim z¹, …, dim zᴺ]`.
    fn dims(&self) -> Vec<usize>;

    /// Stochastic outer mapping `pᵐ(x, Z; ξ)` with minibatch size `batch`.
    fn oracle_p(
        &self,
        client: usize,
        x: &Vector,
        z: &[Vector],
        sample: &SampleToken,
        batch: usize,
    ) -> Vector;

    /// Stochastic inner mapping `s^{m,n}(zⁿ⁻¹, zⁿ; ζ)` for `level = n ∈ 1..=N`
    /// (`z⁰ ≡ x`), with minibatch size `batch`.
    fn oracle_s(
        &self,
        client: usize,
        level: usize,
        z_prev: &Vector,
        z_cur: &Vector,
        sample: &SampleToken,
        batch: usize,
    ) -> Vector;

    /// Noise-free population mapping `P(x, Z)`, if available.
    fn exact_p(&self, x: &Vector, z: &[Vector]) -> Option<Vector>;

    /// Exact fixed point `zⁿ*(zⁿ⁻¹)` of level `n`, if available.
    fn fixed_point(&self, level: usize, z_prev: &Vector) -> Option<Vector>;

    /// Known solution `x*`, if any (used only for distance reporting).
    fn x_star(&self) -> Option<Vector> {
        None
    }

    /// Initial iterate `(x₀, Z₀)`.
    fn initial_point(&self, key: &StreamKey) -> (Vector, Vec<Vector>);
}

/// Problems whose outer mapping splits as `P = direct + indirect`, exposing
/// the direct part on its own.  The frozen-indirect baseline corrects local
/// directions with only this component.
pub trait DirectOracle: MsaProblem {
    /// Direct component of [`MsaProblem::oracle_p`] under the same sample
    /// token (same minibatch, same noise realization).
    fn oracle_p_direct(
        &self,
        client: usize,
        x: &Vector,
        z: &[Vector],
        sample: &SampleToken,
        batch: usize,
    ) -> Vector;
}

/// Which iterate a run reports as its output point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportMode {
    /// The last global iterate `(x_R, Z_R)`.
    FinalIterate,
    /// A local iterate `(x_{r+1,k}, Z_{r+1,k})` at `(r, k)` drawn uniformly
    /// from `[R]×[K]` before the run starts (`k` is clamped to 1 at round 0,
    /// which performs a single local step).
    UniformRandomIterate,
}

fn default_clients_per_round() -> usize {
    1
}

/// Engine hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Outer step size α.
    pub alpha: f64,
    /// Inner step sizes β₁..β_N (one per sequence).
    pub betas: Vec<f64>,
    /// Momentum weight ρ ∈ (0, 1]; ρ = 1 disables the momentum correction.
    pub rho: f64,
    /// Local steps per round K (round 0 always runs exactly one).
    pub k: usize,
    /// Number of rounds R.
    pub r: usize,
    /// Oracle minibatch size B.
    pub batch: usize,
    /// Warm-start batch b₀ for the round-0 fresh directions; defaults to 32·B.
    #[serde(default)]
    pub warm_start_batch: Option<usize>,
    /// Master seed for every stream in the run.
    pub seed: u64,
    #[serde(default = "HyperParams::default_report_mode")]
    pub report_mode: ReportMode,
    /// Clients participating per round.  The analysis covers 1; larger values
    /// average the selected clients' returned iterates (experimental).
    #[serde(default = "default_clients_per_round")]
    pub clients_per_round: usize,
}

impl HyperParams {
    fn default_report_mode() -> ReportMode {
        ReportMode::FinalIterate
    }

    /// Effective warm-start batch: configured value or 32·B.
    pub fn warm_start(&self) -> usize {
        self.warm_start_batch.unwrap_or(32 * self.batch)
    }

    pub fn validate(&self, num_sequences: usize) -> Result<()> {
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.alpha) {
            return Err(MsaError::Config(format!("alpha must be finite and ≥ 0, got {}", self.alpha)));
        }
        if self.betas.len() != num_sequences {
            return Err(MsaError::Config(format!(
                "expected {} inner step sizes, got {}",
                num_sequences,
                self.betas.len()
            )));
        }
        if let Some(bad) = self.betas.iter().find(|b| !finite_nonneg(**b)) {
            return Err(MsaError::Config(format!("inner step sizes must be finite and ≥ 0, got {bad}")));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(MsaError::Config(format!("rho must lie in (0, 1], got {}", self.rho)));
        }
        if self.k == 0 {
            return Err(MsaError::Config("local step count k must be ≥ 1".into()));
        }
        if self.batch == 0 {
            return Err(MsaError::Config("batch size must be ≥ 1".into()));
        }
        if self.warm_start() == 0 {
            return Err(MsaError::Config("warm-start batch must be ≥ 1".into()));
        }
        if self.clients_per_round == 0 {
            return Err(MsaError::Config("clients_per_round must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Server-side iterates and directions carried across rounds.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub round: usize,
    pub x: Vector,
    pub z: Vec<Vector>,
    pub x_prev: Vector,
    pub z_prev: Vec<Vector>,
    pub h_prev: Vector,
    pub q_prev: Vec<Vector>,
}

impl ServerState {
    /// Fresh state at round 0; the previous iterate starts equal to the
    /// current one and previous directions start at zero (they are unused
    /// because round 0 forces ρ = 1).
    pub fn new(x0: Vector, z0: Vec<Vector>) -> Self {
        let h_prev = Vector::zeros(x0.len());
        let q_prev = z0.iter().map(|zn| Vector::zeros(zn.len())).collect();
        ServerState {
            round: 0,
            x_prev: x0.clone(),
            z_prev: z0.clone(),
            x: x0,
            z: z0,
            h_prev,
            q_prev,
        }
    }

    fn roll_over(&mut self, x_next: Vector, z_next: Vec<Vector>, h: Vector, q: Vec<Vector>) {
        self.x_prev = std::mem::replace(&mut self.x, x_next);
        self.z_prev = std::mem::replace(&mut self.z, z_next);
        self.h_prev = h;
        self.q_prev = q;
        self.round += 1;
    }
}

/// `zⁿ⁻¹` for level `n` with the convention `z⁰ ≡ x`.
pub(crate) fn level_prev<'a>(x: &'a Vector, z: &'a [Vector], level: usize) -> &'a Vector {
    if level == 1 {
        x
    } else {
        &z[level - 2]
    }
}

/// Momentum-corrected global directions for the current round.
///
/// Every client evaluates each mapping at the current and previous server
/// iterates under one shared sample token and applies
/// `hᵐ = pᵐ(cur; ξ) + (1−ρ)(h_prev − pᵐ(prev; ξ))` (and the analogue per
/// inner level); the server averages in ascending client order.  At round 0
/// the momentum term is dropped (ρ forced to 1) and fresh estimates use the
/// warm-start batch.  Client evaluations run in parallel; the fixed
/// aggregation order keeps the result independent of thread count.
pub fn global_directions<P: MsaProblem + ?Sized>(
    problem: &P,
    state: &ServerState,
    hp: &HyperParams,
    root: &StreamKey,
) -> (Vector, Vec<Vector>) {
    let m_total = problem.num_clients();
    let n_seq = problem.num_sequences();
    let (rho, batch) =
        if state.round == 0 { (1.0, hp.warm_start()) } else { (hp.rho, hp.batch) };
    let round_key = root.descend(&[domain::GLOBAL, state.round as u64]);

    let per_client: Vec<(Vector, Vec<Vector>)> = (0..m_total)
        .into_par_iter()
        .map(|m| {
            let client_key = round_key.child(m as u64);
            let xi = SampleToken::new(client_key.child(0));
            let mut h = problem.oracle_p(m, &state.x, &state.z, &xi, batch);
            if rho < 1.0 {
                // Form (h_prev − pᵐ(prev)) before scaling so that an exact
                // carry (h_prev equal to the previous evaluation) contributes
                // exactly zero.
                let mut carry = state.h_prev.clone();
                carry.add_scaled(-1.0, &problem.oracle_p(m, &state.x_prev, &state.z_prev, &xi, batch));
                h.add_scaled(1.0 - rho, &carry);
            }
            let mut qs = Vec::with_capacity(n_seq);
            for n in 1..=n_seq {
                let zeta = SampleToken::new(client_key.child(n as u64));
                let mut q = problem.oracle_s(
                    m,
                    n,
                    level_prev(&state.x, &state.z, n),
                    &state.z[n - 1],
                    &zeta,
                    batch,
                );
                if rho < 1.0 {
                    let prev = problem.oracle_s(
                        m,
                        n,
                        level_prev(&state.x_prev, &state.z_prev, n),
                        &state.z_prev[n - 1],
                        &zeta,
                        batch,
                    );
                    let mut carry = state.q_prev[n - 1].clone();
                    carry.add_scaled(-1.0, &prev);
                    q.add_scaled(1.0 - rho, &carry);
                }
                qs.push(q);
            }
            (h, qs)
        })
        .collect();

    let weight = 1.0 / m_total as f64;
    let mut h = Vector::zeros(state.x.len());
    let mut qs: Vec<Vector> = state.z.iter().map(|zn| Vector::zeros(zn.len())).collect();
    for (hm, qm) in &per_client {
        h.add_scaled(weight, hm);
        for (q, qmn) in qs.iter_mut().zip(qm) {
            q.add_scaled(weight, qmn);
        }
    }
    (h, qs)
}

/// Record of one client's local pass: iterates `(x_{r+1,1..K+1})` (the first
/// entry is the round's entry point) and the direction after each correction.
#[derive(Debug, Clone)]
pub struct LocalTrace {
    pub x: Vec<Vector>,
    pub z: Vec<Vec<Vector>>,
    pub h: Vec<Vector>,
}

/// `K` recursively corrected local steps on one client.
///
/// Directions start from the global ones; step `k` draws one fresh shared
/// sample and applies `h ← p(cur; ξ) + h − p(prev; ξ)` (and the analogue for
/// each `qⁿ`), then updates all blocks simultaneously:
/// `x ← x − α·h`, `zⁿ ← zⁿ − βₙ·qⁿ`.  Because the first step's two
/// evaluation points coincide, its correction cancels exactly and the first
/// step moves along the global direction even under noise.  Returns the
/// `(K+1)`-st iterate and the full trace.
pub fn local_msa<P: MsaProblem + ?Sized>(
    problem: &P,
    client: usize,
    h0: &Vector,
    q0: &[Vector],
    x0: &Vector,
    z0: &[Vector],
    steps: usize,
    hp: &HyperParams,
    local_key: &StreamKey,
) -> (Vector, Vec<Vector>, LocalTrace) {
    local_msa_with(
        problem,
        client,
        h0,
        q0,
        x0,
        z0,
        steps,
        hp,
        local_key,
        |p, m, x, z, t, b| p.oracle_p(m, x, z, t, b),
    )
}

/// [`local_msa`] with a custom oracle for the outer-direction corrections
/// (the inner `qⁿ` corrections always use the full `Sⁿ` oracles).
pub(crate) fn local_msa_with<P, F>(
    problem: &P,
    client: usize,
    h0: &Vector,
    q0: &[Vector],
    x0: &Vector,
    z0: &[Vector],
    steps: usize,
    hp: &HyperParams,
    local_key: &StreamKey,
    correction_p: F,
) -> (Vector, Vec<Vector>, LocalTrace)
where
    P: MsaProblem + ?Sized,
    F: Fn(&P, usize, &Vector, &[Vector], &SampleToken, usize) -> Vector,
{
    let n_seq = problem.num_sequences();
    let mut h = h0.clone();
    let mut q: Vec<Vector> = q0.to_vec();
    let mut x_cur = x0.clone();
    let mut z_cur: Vec<Vector> = z0.to_vec();
    let mut x_prev = x0.clone();
    let mut z_prev: Vec<Vector> = z0.to_vec();

    let mut trace = LocalTrace {
        x: vec![x_cur.clone()],
        z: vec![z_cur.clone()],
        h: Vec::with_capacity(steps),
    };

    for k in 1..=steps {
        let step_key = local_key.child(k as u64);
        let xi = SampleToken::new(step_key.child(0));
        // The correction is formed as a difference first: when the two
        // evaluation points coincide (always true at k = 1) the shared sample
        // makes it exactly zero, so the direction is carried through bitwise.
        let mut corr = correction_p(problem, client, &x_cur, &z_cur, &xi, hp.batch);
        corr.add_scaled(-1.0, &correction_p(problem, client, &x_prev, &z_prev, &xi, hp.batch));
        h.add_scaled(1.0, &corr);
        for n in 1..=n_seq {
            let zeta = SampleToken::new(step_key.child(n as u64));
            let mut corr = problem.oracle_s(
                client,
                n,
                level_prev(&x_cur, &z_cur, n),
                &z_cur[n - 1],
                &zeta,
                hp.batch,
            );
            let prev = problem.oracle_s(
                client,
                n,
                level_prev(&x_prev, &z_prev, n),
                &z_prev[n - 1],
                &zeta,
                hp.batch,
            );
            corr.add_scaled(-1.0, &prev);
            q[n - 1].add_scaled(1.0, &corr);
        }

        let mut x_next = x_cur.clone();
        x_next.add_scaled(-hp.alpha, &h);
        let mut z_next = z_cur.clone();
        for (n, zn) in z_next.iter_mut().enumerate() {
            zn.add_scaled(-hp.betas[n], &q[n]);
        }
        x_prev = std::mem::replace(&mut x_cur, x_next);
        z_prev = std::mem::replace(&mut z_cur, z_next);
        trace.x.push(x_cur.clone());
        trace.z.push(z_cur.clone());
        trace.h.push(h.clone());
    }
    (x_cur, z_cur, trace)
}

/// The convergence metric, split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stationarity {
    /// `‖P(x)‖²` with the population mapping evaluated along the chain of
    /// exact fixed points `z¹*(x), z²*(z¹*), …`; `None` when the problem
    /// cannot supply that ground truth.
    pub norm_p_sq: Option<f64>,
    /// `Σₙ ‖zⁿ − zⁿ*(zⁿ⁻¹)‖²` with each gap taken at the *current*
    /// previous-level iterate; `None` when any level lacks a fixed point.
    pub sum_z_gap_sq: Option<f64>,
}

impl Stationarity {
    /// Sum of both terms, or `None` if either is unavailable.
    pub fn total(&self) -> Option<f64> {
        match (self.norm_p_sq, self.sum_z_gap_sq) {
            (Some(a), Some(b)) => Some(a + b),
            _ => None,
        }
    }

    /// True when some term is missing ground truth.
    pub fn is_partial(&self) -> bool {
        self.norm_p_sq.is_none() || self.sum_z_gap_sq.is_none()
    }
}

/// Evaluates `‖P(x)‖² + Σₙ‖zⁿ − zⁿ*(zⁿ⁻¹)‖²` (`z⁰ ≡ x`).
///
/// Missing ground-truth oracles make the corresponding term `None`; nothing
/// is silently substituted.
pub fn stationarity_metric<P: MsaProblem + ?Sized>(
    problem: &P,
    x: &Vector,
    z: &[Vector],
) -> Stationarity {
    let n_seq = problem.num_sequences();

    // ‖P(x)‖² along the chained fixed points.
    let norm_p_sq = (|| {
        let mut chain: Vec<Vector> = Vec::with_capacity(n_seq);
        for n in 1..=n_seq {
            let prev = if n == 1 { x } else { &chain[n - 2] };
            chain.push(problem.fixed_point(n, prev)?);
        }
        let p = problem.exact_p(x, &chain)?;
        Some(p.dot(&p))
    })();

    // Tracking gaps at the current iterates.
    let sum_z_gap_sq = (|| {
        let mut total = 0.0;
        for n in 1..=n_seq {
            let star = problem.fixed_point(n, level_prev(x, z, n))?;
            let gap = &z[n - 1] - &star;
            total += gap.dot(&gap);
        }
        Some(total)
    })();

    Stationarity { norm_p_sq, sum_z_gap_sq }
}

/// Per-round metrics; counters are cumulative over the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    /// Local update steps performed so far.
    pub updates: usize,
    /// Server↔client communications so far (2 per round: direction broadcast
    /// plus model return).
    pub comms: usize,
    pub stationarity: Option<f64>,
    pub norm_p_sq: Option<f64>,
    pub sum_z_gap_sq: Option<f64>,
    pub dist_to_xstar: Option<f64>,
}

/// Full run output: per-round records plus the reported point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunTrajectory {
    pub rounds: Vec<RoundRecord>,
    /// Final global iterate.
    pub final_x: Vector,
    pub final_z: Vec<Vector>,
    /// Report point per the configured [`ReportMode`] (equals the final
    /// iterate in `FinalIterate` mode).
    pub report_x: Vector,
    pub report_z: Vec<Vector>,
}

impl RunTrajectory {
    /// Stationarity value of the last recorded round, if any.
    pub fn final_stationarity(&self) -> Option<f64> {
        self.rounds.last().and_then(|r| r.stationarity)
    }

    pub fn final_dist_to_xstar(&self) -> Option<f64> {
        self.rounds.last().and_then(|r| r.dist_to_xstar)
    }
}

pub(crate) fn check_finite(round: usize, what: &str, v: &Vector) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(MsaError::Divergence { round, what: what.to_string() })
    }
}

pub(crate) fn record_round<P: MsaProblem + ?Sized>(
    problem: &P,
    round: usize,
    updates: usize,
    comms: usize,
    x: &Vector,
    z: &[Vector],
) -> RoundRecord {
    let stat = stationarity_metric(problem, x, z);
    let dist = problem.x_star().map(|xs| (x - &xs).norm());
    RoundRecord {
        round,
        updates,
        comms,
        stationarity: stat.total(),
        norm_p_sq: stat.norm_p_sq,
        sum_z_gap_sq: stat.sum_z_gap_sq,
        dist_to_xstar: dist,
    }
}

/// Runs the full federated algorithm for `hp.r` rounds.
pub fn run_fedmsa<P: MsaProblem + ?Sized>(problem: &P, hp: &HyperParams) -> Result<RunTrajectory> {
    run_engine(problem, hp, |p, m, x, z, t, b| p.oracle_p(m, x, z, t, b))
}

/// Engine core, generic over the oracle used for local outer-direction
/// corrections (the full algorithm passes the true `P` oracle; the
/// frozen-indirect baseline passes only the direct component).
pub(crate) fn run_engine<P, F>(problem: &P, hp: &HyperParams, correction_p: F) -> Result<RunTrajectory>
where
    P: MsaProblem + ?Sized,
    F: Fn(&P, usize, &Vector, &[Vector], &SampleToken, usize) -> Vector + Sync,
{
    hp.validate(problem.num_sequences())?;
    let root = StreamKey::root(hp.seed);
    let (x0, z0) = problem.initial_point(&root.child(domain::INIT));
    let mut state = ServerState::new(x0, z0);

    // In uniform-report mode the output index (r, k) ~ Unif[R]×[K] is drawn
    // up front; the matching local iterate is captured when reached.
    let report_draw = match hp.report_mode {
        ReportMode::UniformRandomIterate if hp.r > 0 => {
            let mut rng = root.child(domain::OUTPUT).rng();
            let r = rand::Rng::random_range(&mut rng, 0..hp.r);
            let k = rand::Rng::random_range(&mut rng, 1..=hp.k);
            Some((r, if r == 0 { 1 } else { k }))
        }
        _ => None,
    };
    let mut report_point: Option<(Vector, Vec<Vector>)> = None;

    let mut rounds = Vec::with_capacity(hp.r);
    let mut updates = 0usize;
    let mut comms = 0usize;

    for r in 0..hp.r {
        let steps = if r == 0 { 1 } else { hp.k };
        let (h, q) = global_directions(problem, &state, hp, &root);
        check_finite(r, "global direction h", &h)?;
        for (n, qn) in q.iter().enumerate() {
            check_finite(r, &format!("global direction q^{}", n + 1), qn)?;
        }

        // Uniform client selection (several distinct clients when the
        // experimental multi-client knob is raised).
        let mut select_rng = root.descend(&[domain::SELECT, r as u64]).rng();
        let m_total = problem.num_clients();
        let picks = hp.clients_per_round.min(m_total);
        let mut selected = Vec::with_capacity(picks);
        while selected.len() < picks {
            let c = rand::Rng::random_range(&mut select_rng, 0..m_total);
            if !selected.contains(&c) {
                selected.push(c);
            }
        }

        let mut x_acc = Vector::zeros(state.x.len());
        let mut z_acc: Vec<Vector> = state.z.iter().map(|zn| Vector::zeros(zn.len())).collect();
        for (slot, &client) in selected.iter().enumerate() {
            let local_key = root.descend(&[domain::LOCAL, r as u64, client as u64]);
            let (x_next, z_next, trace) = local_msa_with(
                problem,
                client,
                &h,
                &q,
                &state.x,
                &state.z,
                steps,
                hp,
                &local_key,
                &correction_p,
            );
            if slot == 0 {
                if let Some((rr, kk)) = report_draw {
                    if rr == r {
                        let kk = kk.min(steps);
                        report_point = Some((trace.x[kk - 1].clone(), trace.z[kk - 1].clone()));
                    }
                }
            }
            x_acc.add_scaled(1.0 / picks as f64, &x_next);
            for (acc, zn) in z_acc.iter_mut().zip(&z_next) {
                acc.add_scaled(1.0 / picks as f64, zn);
            }
        }
        check_finite(r, "iterate x", &x_acc)?;
        for (n, zn) in z_acc.iter().enumerate() {
            check_finite(r, &format!("iterate z^{}", n + 1), zn)?;
        }

        state.roll_over(x_acc, z_acc, h, q);
        updates += steps;
        comms += 2;
        rounds.push(record_round(problem, r, updates, comms, &state.x, &state.z));
    }

    let (report_x, report_z) = match report_point {
        Some(p) => p,
        None => (state.x.clone(), state.z.clone()),
    };
    Ok(RunTrajectory {
        rounds,
        final_x: state.x,
        final_z: state.z,
        report_x,
        report_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::standard_normal_vector;

    /// Minimal single-client linear test problem:
    /// `S(x, (w, v)) = (w − x, v − w)`, `P = v`, with optional additive
    /// Gaussian oracle noise.  Fixed points `w*(x) = x`, `v*(w) = w`; the
    /// chained outer mapping is `P(x) = x`.
    struct ToyChain {
        clients: usize,
        noise: f64,
        init: (Vector, Vec<Vector>),
    }

    impl ToyChain {
        fn noiseless(x0: f64, w0: f64, v0: f64) -> Self {
            ToyChain {
                clients: 1,
                noise: 0.0,
                init: (
                    Vector::from_vec(vec![x0]),
                    vec![Vector::from_vec(vec![w0]), Vector::from_vec(vec![v0])],
                ),
            }
        }

        fn perturb(v: &Vector, tok: &SampleToken, scale: f64, batch: usize) -> Vector {
            if scale == 0.0 {
                return v.clone();
            }
            let mut rng = tok.rng();
            let mut out = v.clone();
            let noise = standard_normal_vector(&mut rng, v.len());
            out.add_scaled(scale / (batch as f64).sqrt(), &noise);
            out
        }
    }

    impl MsaProblem for ToyChain {
        fn num_sequences(&self) -> usize {
            2
        }
        fn num_clients(&self) -> usize {
            self.clients
        }
        fn dims(&self) -> Vec<usize> {
            vec![1, 1, 1]
        }
        fn oracle_p(
            &self,
            _client: usize,
            _x: &Vector,
            z: &[Vector],
            sample: &SampleToken,
            batch: usize,
        ) -> Vector {
            Self::perturb(&z[1], &sample.substream(0), self.noise, batch)
        }
        fn oracle_s(
            &self,
            _client: usize,
            level: usize,
            z_prev: &Vector,
            z_cur: &Vector,
            sample: &SampleToken,
            batch: usize,
        ) -> Vector {
            Self::perturb(&(z_cur - z_prev), &sample.substream(level as u64), self.noise, batch)
        }
        fn exact_p(&self, _x: &Vector, z: &[Vector]) -> Option<Vector> {
            Some(z[1].clone())
        }
        fn fixed_point(&self, _level: usize, z_prev: &Vector) -> Option<Vector> {
            Some(z_prev.clone())
        }
        fn initial_point(&self, _key: &StreamKey) -> (Vector, Vec<Vector>) {
            self.init.clone()
        }
    }

    fn hp(alpha: f64, beta: f64, rho: f64, k: usize, r: usize, seed: u64) -> HyperParams {
        HyperParams {
            alpha,
            betas: vec![beta, beta],
            rho,
            k,
            r,
            batch: 1,
            warm_start_batch: None,
            seed,
            report_mode: ReportMode::FinalIterate,
            clients_per_round: 1,
        }
    }

    #[test]
    fn toy_chain_contracts_to_zero() {
        // The induced linear iteration has spectral radius ≈ 0.9905 at these
        // steps, so the squared metric decays by ≈ 0.981 per round; 800
        // rounds bring it from 2 to ≈ 3.6e-7.
        let problem = ToyChain::noiseless(1.0, 0.0, 0.0);
        let traj = run_fedmsa(&problem, &hp(0.1, 0.1, 1.0, 1, 800, 1)).unwrap();
        assert!(traj.final_stationarity().unwrap() < 1e-6, "{:?}", traj.rounds.last());
        assert!(traj.final_x[0].abs() < 1e-3);
        assert_eq!(traj.rounds.len(), 800);
        assert_eq!(traj.rounds.last().unwrap().comms, 1600);
    }

    #[test]
    fn toy_chain_matches_reference_linear_iteration() {
        // Noiseless, K = 1: the engine's state (x, w, v) follows
        //   x ← x − 0.1 v, w ← w − 0.1(w − x), v ← v − 0.1(v − w)
        // exactly (directions telescope to the current exact mappings).
        let problem = ToyChain::noiseless(1.0, 0.5, -0.25);
        let traj = run_fedmsa(&problem, &hp(0.1, 0.1, 0.5, 1, 40, 7)).unwrap();

        let (mut x, mut w, mut v) = (1.0f64, 0.5f64, -0.25f64);
        for _ in 0..40 {
            let (nx, nw, nv) = (x - 0.1 * v, w - 0.1 * (w - x), v - 0.1 * (v - w));
            x = nx;
            w = nw;
            v = nv;
        }
        assert!((traj.final_x[0] - x).abs() < 1e-9);
        assert!((traj.final_z[0][0] - w).abs() < 1e-9);
        assert!((traj.final_z[1][0] - v).abs() < 1e-9);
    }

    #[test]
    fn stationarity_examples() {
        let problem = ToyChain::noiseless(1.0, 1.0, 1.0);
        // At (x, w, v) = (1, 1, 1): chained fixed points give P = 1 and the
        // tracking gaps vanish, so the metric is 1.
        let z = vec![Vector::from_vec(vec![1.0]), Vector::from_vec(vec![1.0])];
        let s = stationarity_metric(&problem, &Vector::from_vec(vec![1.0]), &z);
        assert_eq!(s.norm_p_sq, Some(1.0));
        assert_eq!(s.sum_z_gap_sq, Some(0.0));
        assert_eq!(s.total(), Some(1.0));

        // At an exact solution the metric is 0.
        let z0 = vec![Vector::zeros(1), Vector::zeros(1)];
        let s = stationarity_metric(&problem, &Vector::zeros(1), &z0);
        assert_eq!(s.total(), Some(0.0));

        // Perturbing the last tracking variable by δ from its fixed point
        // adds exactly δ² and leaves the chained P term and the other gap
        // untouched (earlier levels feed later targets, so only the last
        // level can be perturbed in isolation).
        let delta = 1e-3;
        let z = vec![Vector::zeros(1), Vector::from_vec(vec![delta])];
        let s = stationarity_metric(&problem, &Vector::zeros(1), &z);
        assert!((s.total().unwrap() - delta * delta).abs() < 1e-18);
    }

    #[test]
    fn rho_one_drops_momentum_term() {
        // With ρ = 1 the direction is the plain fresh average even when the
        // carried previous direction is garbage.
        let problem = ToyChain::noiseless(2.0, 3.0, 5.0);
        let hp1 = hp(0.1, 0.1, 1.0, 1, 1, 3);
        let (x0, z0) = problem.initial_point(&StreamKey::root(3));
        let mut state = ServerState::new(x0, z0);
        state.round = 1; // escape the round-0 override
        state.h_prev = Vector::from_vec(vec![1e9]);
        let (h, q) = global_directions(&problem, &state, &hp1, &StreamKey::root(3));
        assert_eq!(h.as_slice(), &[5.0]);
        assert_eq!(q[0].as_slice(), &[3.0 - 2.0]);
        assert_eq!(q[1].as_slice(), &[5.0 - 3.0]);
    }

    #[test]
    fn stationary_iterates_give_exponential_averaging() {
        // cur == prev makes the two oracle evaluations cancel, leaving
        // h = ρ·fresh + (1−ρ)·h_prev.
        let problem = ToyChain::noiseless(2.0, 3.0, 5.0);
        let hp1 = hp(0.1, 0.1, 0.25, 1, 1, 3);
        let (x0, z0) = problem.initial_point(&StreamKey::root(3));
        let mut state = ServerState::new(x0, z0);
        state.round = 2;
        state.h_prev = Vector::from_vec(vec![8.0]);
        let (h, _) = global_directions(&problem, &state, &hp1, &StreamKey::root(3));
        // 0.25·5 + 0.75·8 = 7.25.
        assert!((h[0] - 7.25).abs() < 1e-15);
    }

    #[test]
    fn noiseless_momentum_telescopes_to_exact_mapping() {
        // ρ < 1, zero noise: h_r = h_{r−1} + P(cur) − P(prev); starting from
        // the round-0 fresh estimate h₀ = P(x₀), induction gives
        // h_r = P(x_r, Z_r) exactly for all r.  Run a few rounds and compare
        // the carried direction to the exact mapping at the previous iterate.
        let problem = ToyChain::noiseless(1.0, -0.5, 0.75);
        let hp1 = hp(0.05, 0.05, 0.125, 3, 12, 11);
        let root = StreamKey::root(hp1.seed);
        let (x0, z0) = problem.initial_point(&root.child(domain::INIT));
        let mut state = ServerState::new(x0, z0);
        for r in 0..12 {
            let steps = if r == 0 { 1 } else { hp1.k };
            let (h, q) = global_directions(&problem, &state, &hp1, &root);
            let expect = problem.exact_p(&state.x, &state.z).unwrap();
            assert!(
                (&h - &expect).norm() < 1e-12,
                "round {r}: direction drifted from the exact mapping"
            );
            let (xn, zn, _) = local_msa(
                &problem,
                0,
                &h,
                &q,
                &state.x,
                &state.z,
                steps,
                &hp1,
                &root.descend(&[domain::LOCAL, r as u64, 0]),
            );
            state.roll_over(xn, zn, h, q);
        }
    }

    #[test]
    fn local_first_step_follows_global_direction_even_with_noise() {
        let problem = ToyChain { clients: 1, noise: 0.5, ..ToyChain::noiseless(1.0, 0.0, 0.0) };
        let hp1 = hp(0.1, 0.1, 1.0, 4, 1, 5);
        let x0 = Vector::from_vec(vec![1.0]);
        let z0 = vec![Vector::zeros(1), Vector::zeros(1)];
        let h0 = Vector::from_vec(vec![0.3]);
        let q0 = vec![Vector::from_vec(vec![-0.2]), Vector::from_vec(vec![0.1])];
        let (_, _, trace) =
            local_msa(&problem, 0, &h0, &q0, &x0, &z0, 4, &hp1, &StreamKey::root(5).child(99));
        // k = 1 evaluates both correction points at the same iterate with the
        // same sample, so the correction cancels exactly.
        assert_eq!(trace.h[0].as_slice(), h0.as_slice());
        assert_eq!(trace.x[1][0], 1.0 - 0.1 * 0.3);
        // Later steps do get corrected under noise.
        assert_ne!(trace.h[1].as_slice(), h0.as_slice());
    }

    #[test]
    fn zero_steps_leave_iterate_fixed() {
        let problem = ToyChain { clients: 1, noise: 0.3, ..ToyChain::noiseless(1.0, 2.0, 3.0) };
        let hp0 = hp(0.0, 0.0, 0.5, 5, 8, 13);
        let traj = run_fedmsa(&problem, &hp0).unwrap();
        assert_eq!(traj.final_x.as_slice(), &[1.0]);
        assert_eq!(traj.final_z[0].as_slice(), &[2.0]);
        assert_eq!(traj.final_z[1].as_slice(), &[3.0]);
    }

    #[test]
    fn zero_rounds_reports_initialization() {
        let problem = ToyChain::noiseless(4.0, 5.0, 6.0);
        let traj = run_fedmsa(&problem, &hp(0.1, 0.1, 1.0, 1, 0, 2)).unwrap();
        assert!(traj.rounds.is_empty());
        assert_eq!(traj.report_x.as_slice(), &[4.0]);
        assert_eq!(traj.report_z[0].as_slice(), &[5.0]);
    }

    #[test]
    fn identical_clients_match_single_client_trajectory() {
        // Averaging identical per-client directions is the identity (up to
        // accumulation rounding) and every client's oracles agree, so M = 5
        // reproduces the M = 1 trajectory.
        let single = ToyChain::noiseless(1.0, 0.3, -0.7);
        let many = ToyChain { clients: 5, ..ToyChain::noiseless(1.0, 0.3, -0.7) };
        let h = hp(0.08, 0.06, 0.5, 3, 30, 21);
        let a = run_fedmsa(&single, &h).unwrap();
        let b = run_fedmsa(&many, &h).unwrap();
        assert!((a.final_x[0] - b.final_x[0]).abs() < 1e-12);
        assert!((a.final_z[1][0] - b.final_z[1][0]).abs() < 1e-12);
    }

    #[test]
    fn unbiased_direction_with_rho_one() {
        // Monte-Carlo over fresh seeds of a single round's h against the
        // exact mapping (the oracle noise is additive Gaussian).
        let problem = ToyChain { clients: 3, noise: 0.4, ..ToyChain::noiseless(0.6, -0.2, 0.9) };
        let hp1 = hp(0.1, 0.1, 1.0, 1, 1, 0);
        let (x0, z0) = problem.initial_point(&StreamKey::root(0));
        let expect = problem.exact_p(&x0, &z0).unwrap()[0];
        let trials = 10_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for t in 0..trials {
            let mut state = ServerState::new(x0.clone(), z0.clone());
            state.round = 1; // momentum path with ρ = 1 still collapses
            let (h, _) = global_directions(&problem, &state, &hp1, &StreamKey::root(1000 + t as u64));
            sum += h[0];
            sumsq += h[0] * h[0];
        }
        let mean = sum / trials as f64;
        let var = (sumsq - sum * sum / trials as f64) / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        assert!(
            (mean - expect).abs() <= 4.0 * se.max(1e-12),
            "mean {mean:.4} vs exact {expect:.4} (se {se:.2e})"
        );
    }

    #[test]
    fn fixed_point_start_never_moves() {
        let problem = ToyChain::noiseless(0.0, 0.0, 0.0);
        let traj = run_fedmsa(&problem, &hp(0.2, 0.2, 0.5, 4, 50, 9)).unwrap();
        assert_eq!(traj.final_x.as_slice(), &[0.0]);
        assert!(traj.final_stationarity().unwrap() == 0.0);
    }

    #[test]
    fn divergence_is_detected_and_named() {
        let problem = ToyChain::noiseless(1.0, 0.0, 0.0);
        // Step size far beyond stability for the linear chain.
        let err = run_fedmsa(&problem, &hp(1e6, 1e6, 1.0, 5, 400, 1)).unwrap_err();
        match err {
            MsaError::Divergence { round, .. } => assert!(round < 400),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn uniform_report_mode_returns_visited_iterate() {
        let problem = ToyChain::noiseless(1.0, 0.5, 0.25);
        let mut h = hp(0.05, 0.05, 0.5, 3, 20, 31);
        h.report_mode = ReportMode::UniformRandomIterate;
        let traj = run_fedmsa(&problem, &h).unwrap();
        // The reported point is some earlier local iterate, not necessarily
        // the final one; it must be finite and of the right shape.
        assert_eq!(traj.report_x.len(), 1);
        assert_eq!(traj.report_z.len(), 2);
        assert!(traj.report_x.is_finite());
        // Deterministic re-draw.
        let traj2 = run_fedmsa(&problem, &h).unwrap();
        assert_eq!(traj.report_x.as_slice(), traj2.report_x.as_slice());
    }

    #[test]
    fn runs_are_bitwise_deterministic_across_thread_counts() {
        let problem = ToyChain { clients: 4, noise: 0.3, ..ToyChain::noiseless(1.0, 0.0, 0.0) };
        let h = hp(0.05, 0.05, 0.5, 3, 25, 17);
        let a = run_fedmsa(&problem, &h).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_fedmsa(&problem, &h).unwrap());
        assert_eq!(a.final_x.as_slice(), b.final_x.as_slice());
        let sa: Vec<_> = a.rounds.iter().map(|r| r.stationarity).collect();
        let sb: Vec<_> = b.rounds.iter().map(|r| r.stationarity).collect();
        assert_eq!(sa, sb);
    }

    #[test]
    fn hyperparameter_validation_rejects_bad_values() {
        let base = hp(0.1, 0.1, 0.5, 2, 5, 1);
        assert!(base.validate(2).is_ok());
        assert!(base.validate(1).is_err()); // betas length mismatch
        let mut bad = base.clone();
        bad.rho = 0.0;
        assert!(bad.validate(2).is_err());
        let mut bad = base.clone();
        bad.rho = 1.5;
        assert!(bad.validate(2).is_err());
        let mut bad = base.clone();
        bad.k = 0;
        assert!(bad.validate(2).is_err());
        let mut bad = base.clone();
        bad.alpha = f64::NAN;
        assert!(bad.validate(2).is_err());
        let mut bad = base;
        bad.batch = 0;
        assert!(bad.validate(2).is_err());
    }
}

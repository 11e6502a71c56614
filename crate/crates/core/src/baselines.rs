//! Comparison algorithms sharing the engine's metric schema.
//!
//! * [`run_centralized_msa`] — plain (non-federated) stochastic
//!   approximation: every iteration draws a size-`B` minibatch from the
//!   pooled population (a uniform client per draw, so per-update sample
//!   budgets match the federated local steps), takes one step of each
//!   variable, and counts one update and zero communications.  An `(R, K)`
//!   configuration runs `R·K` iterations, so update-count-matched comparisons
//!   against the federated runs fall out of the shared record schema.
//! * [`run_frozen_indirect`] — the federated algorithm with one surgical
//!   change: local corrections to the outer direction use only the *direct*
//!   component of `P`, so everything the direction learned about the
//!   indirect (sequence-coupled) part stays frozen at its round-start value.
//!   This isolates the mechanism that distinguishes locally corrected
//!   hypergradients from prior work; it is available exactly for problems
//!   exposing the [`DirectOracle`] split.

use crate::msa::{
    check_finite, level_prev, record_round, run_engine, DirectOracle, HyperParams, MsaProblem,
    ReportMode, Result, RunTrajectory,
};
use crate::numerics::Vector;
use crate::rng::{domain, SampleToken, StreamKey};

/// Centralized stochastic approximation at the federated run's update budget.
///
/// Per iteration `t`: `hp.batch` pooled draws — each picks a uniform client
/// and evaluates its oracles on one sample — are averaged into population
/// mapping estimates, applied as `x ← x − α·p̂`, `zⁿ ← zⁿ − βₙ·q̂ⁿ`, and
/// metrics are recorded at the new iterate.  One pooled draw therefore costs
/// the same sample budget as one federated local step, keeping update-count
/// comparisons sample-fair.  Momentum, warm-start, and client-selection
/// settings of `hp` are inert here; `hp.r · hp.k` fixes the iteration count.
pub fn run_centralized_msa<P: MsaProblem + ?Sized>(
    problem: &P,
    hp: &HyperParams,
) -> Result<RunTrajectory> {
    hp.validate(problem.num_sequences())?;
    let t_total = hp.r * hp.k;
    let root = StreamKey::root(hp.seed);
    let (mut x, mut z) = problem.initial_point(&root.child(domain::INIT));

    let report_draw = match hp.report_mode {
        ReportMode::UniformRandomIterate if t_total > 0 => {
            let mut rng = root.child(domain::OUTPUT).rng();
            Some(rand::Rng::random_range(&mut rng, 0..t_total))
        }
        _ => None,
    };
    let mut report_point: Option<(Vector, Vec<Vector>)> = None;

    let m_total = problem.num_clients();
    let n_seq = problem.num_sequences();
    let weight = 1.0 / hp.batch as f64;
    let mut rounds = Vec::with_capacity(t_total);

    for t in 0..t_total {
        if report_draw == Some(t) {
            report_point = Some((x.clone(), z.clone()));
        }
        let step_key = root.descend(&[domain::GLOBAL, t as u64]);
        let mut h = Vector::zeros(x.len());
        let mut q: Vec<Vector> = z.iter().map(|zn| Vector::zeros(zn.len())).collect();
        for j in 0..hp.batch {
            let draw_key = step_key.child(j as u64);
            let m = rand::Rng::random_range(&mut draw_key.rng(), 0..m_total);
            let xi = SampleToken::new(draw_key.child(0));
            h.add_scaled(weight, &problem.oracle_p(m, &x, &z, &xi, 1));
            for n in 1..=n_seq {
                let zeta = SampleToken::new(draw_key.child(n as u64));
                let s = problem.oracle_s(m, n, level_prev(&x, &z, n), &z[n - 1], &zeta, 1);
                q[n - 1].add_scaled(weight, &s);
            }
        }
        check_finite(t, "direction p", &h)?;
        for (n, qn) in q.iter().enumerate() {
            check_finite(t, &format!("direction s^{}", n + 1), qn)?;
        }

        x.add_scaled(-hp.alpha, &h);
        for (n, zn) in z.iter_mut().enumerate() {
            zn.add_scaled(-hp.betas[n], &q[n]);
        }
        check_finite(t, "iterate x", &x)?;
        for (n, zn) in z.iter().enumerate() {
            check_finite(t, &format!("iterate z^{}", n + 1), zn)?;
        }
        rounds.push(record_round(problem, t, t + 1, 0, &x, &z));
    }

    let (report_x, report_z) = match report_point {
        Some(p) => p,
        None => (x.clone(), z.clone()),
    };
    Ok(RunTrajectory { rounds, final_x: x, final_z: z, report_x, report_z })
}

/// The federated algorithm with the indirect part of the outer direction
/// frozen between server rounds.
///
/// Identical to [`run_fedmsa`](crate::msa::run_fedmsa) — same streams, same
/// round structure, same inner-sequence corrections — except that the local
/// outer-direction corrections evaluate
/// [`DirectOracle::oracle_p_direct`] instead of the full mapping.  With
/// `K = 1` the single local correction cancels at coincident points either
/// way, so the trajectory matches the full algorithm bitwise.
pub fn run_frozen_indirect<P: DirectOracle + ?Sized>(
    problem: &P,
    hp: &HyperParams,
) -> Result<RunTrajectory> {
    run_engine(problem, hp, |p, m, x, z, t, b| p.oracle_p_direct(m, x, z, t, b))
}

//! Penalty-based double-loop optimization: the inner loop alternates a UAV
//! positioning step and a resource-allocation step, each solving a concave
//! surrogate and backtracking along the resulting ascent direction; the outer
//! loop grows the penalty multipliers until the relaxed association variables
//! are binary to tolerance, then rounds and re-verifies.

use crate::channel::{ChannelError, ChannelParams};
use crate::geometry::BlockedRegion;
use crate::netmodel::{self, RateBreakdown, SolutionState};
use crate::subsolver::{self, MaximinProblem, SolveError};
use crate::surrogate::{self, PositioningSurrogate, RaSurrogate, SurrogateError};
use nalgebra::Vector3;
use ndarray::Array3;
use serde::Serialize;
use std::time::Instant;
use thiserror::Error;

const LN2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Error)]
pub enum PdlioError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("subproblem solve failed at outer {outer}, inner {inner}: {source}")]
    Solve { outer: usize, inner: usize, source: SolveError },
}

/// Line-search and loop-control parameters.
#[derive(Debug, Clone)]
pub struct AlgoParams {
    /// Backtracking scale for the stepsize gamma = zeta^t.
    pub zeta: f64,
    /// Fraction of the directional derivative the objective gain must reach.
    pub tau: f64,
    /// Inner-loop stop: objective gain below this threshold.
    pub eps_inner: f64,
    /// Outer-loop stop: max association violation c(1-c) below this.
    pub eps_outer: f64,
    /// Initial penalty multiplier value.
    pub lambda0: f64,
    /// Initial adaption parameter for the multiplier stepsize.
    pub mu0: f64,
    /// Below this stepsize, the step is declared zero.
    pub gamma_floor: f64,
    pub max_inner: usize,
    pub max_outer: usize,
}

impl AlgoParams {
    pub fn defaults() -> Self {
        Self {
            zeta: 0.9,
            tau: 0.01,
            eps_inner: 1e-3,
            eps_outer: 1e-4,
            lambda0: 0.1,
            mu0: 2.0,
            gamma_floor: 0.9f64.powi(60),
            max_inner: 40,
            max_outer: 50,
        }
    }
}

/// Scene data the algorithm runs against.
pub struct Problem {
    pub users: Vec<Vector3<f64>>,
    pub regions_by_user: Vec<Vec<BlockedRegion>>,
    pub channel: ChannelParams,
    pub p_max: f64,
    pub d_min: f64,
    /// Horizontal extent (x, y) of the allowed region.
    pub area: (f64, f64),
    pub h_min: f64,
    pub algo: AlgoParams,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Disabled for the clustering-placement benchmark.
    pub optimize_positions: bool,
    /// Frozen association benchmark: c variables pinned at their start.
    pub freeze_assoc: bool,
    /// Disabled when the association never leaves a binary point.
    pub outer_loop: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { optimize_positions: true, freeze_assoc: false, outer_loop: true }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationTrace {
    pub outer: usize,
    pub inner: usize,
    pub z: f64,
    pub min_rate: f64,
    pub max_violation: f64,
    pub gamma1: f64,
    pub gamma2: f64,
    pub bottleneck_user: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum RunStatus {
    Converged,
    NotConverged,
}

#[derive(Debug)]
pub struct RunReport {
    pub state: SolutionState,
    pub status: RunStatus,
    pub min_rate: f64,
    pub rate_user: Vec<f64>,
    pub initial_min_rate: f64,
    /// Penalized objective right before rounding.
    pub z_before_rounding: f64,
    /// Objective (equal to min rate: binary association has zero penalty)
    /// after rounding.
    pub z_after_rounding: f64,
    pub max_violation_before_rounding: f64,
    pub outer_iterations: usize,
    pub inner_iterations_total: usize,
    pub trace: Vec<IterationTrace>,
}

/// Observation points for verification harnesses: each event fires with the
/// freshly built surrogate, the expansion state, and the exact objective
/// there.
pub enum InspectEvent<'a> {
    Positioning {
        outer: usize,
        inner: usize,
        surrogate: &'a PositioningSurrogate,
        state: &'a SolutionState,
        z: f64,
    },
    ResourceAllocation {
        outer: usize,
        inner: usize,
        surrogate: &'a RaSurrogate,
        state: &'a SolutionState,
        z: f64,
    },
}

pub type Inspector<'a> = dyn FnMut(InspectEvent<'_>) + 'a;

/// Exact penalized objective of a state under the problem's channel.
pub fn evaluate(problem: &Problem, state: &SolutionState) -> Result<(f64, RateBreakdown), ChannelError> {
    let evals = surrogate::channel_evals(
        &state.positions,
        &problem.users,
        &problem.regions_by_user,
        &problem.channel,
    )?;
    let gains = surrogate::gain_matrix(&evals);
    Ok(netmodel::objective_z(state, &gains, problem.channel.noise_power))
}

pub struct StepOutcome {
    pub gamma: f64,
    pub dirderiv: f64,
    pub z_after: f64,
}

/// One positioning update: build the surrogate around the current positions,
/// solve it, then backtrack along the ascent direction until the Armijo
/// condition and the true pairwise-separation constraints both hold.
pub fn positioning_step(
    problem: &Problem,
    state: &mut SolutionState,
    outer: usize,
    inner: usize,
    inspector: Option<&mut Inspector<'_>>,
) -> Result<StepOutcome, PdlioError> {
    let algo = &problem.algo;
    let evals = surrogate::channel_evals(
        &state.positions,
        &problem.users,
        &problem.regions_by_user,
        &problem.channel,
    )?;
    let gains = surrogate::gain_matrix(&evals);
    let (z0, breakdown) = netmodel::objective_z(state, &gains, problem.channel.noise_power);
    let sur = surrogate::build_positioning_surrogate(state, &problem.users, &evals, &problem.channel);
    if let Some(f) = inspector {
        f(InspectEvent::Positioning { outer, inner, surrogate: &sur, state, z: z0 });
    }

    let m_count = state.positions.len();
    let dim = 3 * m_count;
    let separation = surrogate::linearize_separation(&state.positions, problem.d_min)?;
    let mut lower = Vec::with_capacity(dim);
    let mut upper = Vec::with_capacity(dim);
    for _ in 0..m_count {
        lower.extend([0.0, 0.0, problem.h_min]);
        upper.extend([problem.area.0, problem.area.1, f64::INFINITY]);
    }
    let start = surrogate::flatten_positions(&state.positions);
    let hint = interior_positioning_hint(&start, &separation, &lower, &upper);
    let subproblem = MaximinProblem {
        dim,
        pieces: sur.pieces.clone(),
        extra: None,
        lin_ineq: separation,
        lin_eq: vec![],
        lower,
        upper,
        start: start.clone(),
        interior_hint: hint,
    };
    let report = subsolver::solve_maximin(
        &subproblem,
        subsolver::DEFAULT_TOL_KKT,
        subsolver::DEFAULT_TOL_FEAS,
        subsolver::DEFAULT_MAX_ITER,
    )
    .map_err(|source| PdlioError::Solve { outer, inner, source })?;
    if report.max_violation > 1e-8 {
        // A drifted subproblem solution would contaminate the iterate; skip.
        return Ok(StepOutcome { gamma: 0.0, dirderiv: 0.0, z_after: z0 });
    }

    let direction: Vec<f64> = report.solution.iter().zip(&start).map(|(a, b)| a - b).collect();

    // Directional derivative of the exact objective at the expansion point,
    // through the bottleneck user only (the penalty term does not depend on
    // positions).
    let kp = breakdown.bottleneck_user;
    let dir_positions = surrogate::unflatten_positions(&direction);
    let sigma2 = problem.channel.noise_power;
    let (_, mc, nc) = state.assoc.dim();
    let mut dirderiv = 0.0;
    for j in 0..mc {
        let proj = dir_positions[j].dot(&sur.grad_gain[kp][j]);
        for n in 0..nc {
            let p = state.powers[[j, n]] / sigma2;
            for m in 0..mc {
                dirderiv += sur.b_hat[[kp, m, n]] / LN2 * p * proj;
                if m != j {
                    dirderiv -= sur.b_bar[[kp, m, n]] / LN2 * p * proj;
                }
            }
        }
    }

    // Backtracking: gamma = zeta^t, requiring true separation feasibility
    // and the sufficient-increase condition.
    let mut gamma = 1.0;
    let mut accepted = None;
    while gamma >= algo.gamma_floor {
        let candidate: Vec<Vector3<f64>> = state
            .positions
            .iter()
            .zip(&dir_positions)
            .map(|(x, d)| x + gamma * d)
            .collect();
        if pairwise_separation_ok(&candidate, problem.d_min) {
            let trial = SolutionState { positions: candidate.clone(), ..state.clone() };
            if let Ok((z, _)) = evaluate(problem, &trial) {
                if z - z0 >= algo.tau * gamma * dirderiv - 1e-12 {
                    accepted = Some((candidate, z, gamma));
                    break;
                }
            }
        }
        gamma *= algo.zeta;
    }

    match accepted {
        Some((positions, z, gamma)) => {
            state.positions = positions;
            Ok(StepOutcome { gamma, dirderiv, z_after: z })
        }
        None => Ok(StepOutcome { gamma: 0.0, dirderiv, z_after: z0 }),
    }
}

fn pairwise_separation_ok(positions: &[Vector3<f64>], d_min: f64) -> bool {
    for m in 0..positions.len() {
        for j in (m + 1)..positions.len() {
            if (positions[m] - positions[j]).norm() < d_min - 1e-9 {
                return false;
            }
        }
    }
    true
}

/// Strictly interior point of {linearized separation, box}: constraint-wise
/// inflation from the start, one slack unit at a time. Returns None when the
/// heuristic fails; the subsolver then degrades to a zero step.
fn interior_positioning_hint(
    start: &[f64],
    separation: &[subsolver::LinearConstraint],
    lower: &[f64],
    upper: &[f64],
) -> Option<Vec<f64>> {
    let margin = 0.5;
    let target = 1.0;
    let mut y = start.to_vec();
    for _ in 0..100 {
        let mut moved = false;
        for c in separation {
            let lhs: f64 = c.coeffs.iter().map(|&(i, w)| w * y[i]).sum();
            let slack = c.rhs - lhs;
            if slack < target {
                let norm2: f64 = c.coeffs.iter().map(|&(_, w)| w * w).sum();
                let scale = (target - slack) / norm2;
                for &(i, w) in &c.coeffs {
                    y[i] += scale * w * -1.0;
                }
                moved = true;
            }
        }
        for i in 0..y.len() {
            let lo = lower[i] + margin;
            let hi = if upper[i].is_finite() { upper[i] - margin } else { f64::INFINITY };
            if y[i] < lo {
                y[i] = lo;
                moved = true;
            } else if y[i] > hi {
                y[i] = hi;
                moved = true;
            }
        }
        if !moved {
            return Some(y);
        }
    }
    // Final verification after the pass budget.
    let ok = separation.iter().all(|c| {
        let lhs: f64 = c.coeffs.iter().map(|&(i, w)| w * y[i]).sum();
        c.rhs - lhs > 1e-6
    }) && y.iter().enumerate().all(|(i, &v)| {
        v > lower[i] && (!upper[i].is_finite() || v < upper[i])
    });
    ok.then_some(y)
}

/// One resource-allocation update at fixed positions: concave surrogate in
/// (P, C), epigraph solve, Armijo backtracking. Feasibility during the line
/// search is automatic (both endpoints feasible, constraint set convex).
pub fn ra_step(
    problem: &Problem,
    state: &mut SolutionState,
    freeze_assoc: bool,
    outer: usize,
    inner: usize,
    inspector: Option<&mut Inspector<'_>>,
) -> Result<StepOutcome, PdlioError> {
    let algo = &problem.algo;
    let evals = surrogate::channel_evals(
        &state.positions,
        &problem.users,
        &problem.regions_by_user,
        &problem.channel,
    )?;
    let gains = surrogate::gain_matrix(&evals);
    let (z0, breakdown) = netmodel::objective_z(state, &gains, problem.channel.noise_power);
    let sur = surrogate::build_ra_surrogate(state, &gains, problem.channel.noise_power);
    if let Some(f) = inspector {
        f(InspectEvent::ResourceAllocation { outer, inner, surrogate: &sur, state, z: z0 });
    }

    let (kc, mc, nc) = state.assoc.dim();
    let mut cons = surrogate::ra_constraints(kc, mc, nc, problem.p_max);
    if freeze_assoc {
        for k in 0..kc {
            for m in 0..mc {
                for n in 0..nc {
                    let i = surrogate::c_index(k, m, n, mc, nc);
                    cons.lower[i] = state.assoc[[k, m, n]];
                    cons.upper[i] = state.assoc[[k, m, n]];
                }
            }
        }
    }
    let start = surrogate::pack_allocation(&state.powers, &state.assoc);
    let subproblem = MaximinProblem {
        dim: sur.dim,
        pieces: sur.pieces.clone(),
        extra: Some(sur.extra.clone()),
        lin_ineq: cons.lin_ineq,
        lin_eq: cons.lin_eq,
        lower: cons.lower,
        upper: cons.upper,
        start: start.clone(),
        interior_hint: Some(surrogate::ra_interior_hint(kc, mc, nc, problem.p_max)),
    };
    let report = subsolver::solve_maximin(
        &subproblem,
        subsolver::DEFAULT_TOL_KKT,
        subsolver::DEFAULT_TOL_FEAS,
        subsolver::DEFAULT_MAX_ITER,
    )
    .map_err(|source| PdlioError::Solve { outer, inner, source })?;
    if report.max_violation > 1e-8 {
        // A drifted subproblem solution would contaminate the iterate; skip.
        return Ok(StepOutcome { gamma: 0.0, dirderiv: 0.0, z_after: z0 });
    }

    let direction: Vec<f64> = report.solution.iter().zip(&start).map(|(a, b)| a - b).collect();
    let (dir_p, dir_c) = surrogate::unpack_allocation(&direction, kc, mc, nc);

    // Stacked directional derivative: power rows through the bottleneck user,
    // association rows through the bottleneck rate slope plus the penalty.
    let kp = breakdown.bottleneck_user;
    let sigma2 = problem.channel.noise_power;
    let mut dirderiv = 0.0;
    for n in 0..nc {
        let weighted: f64 = (0..mc).map(|j| gains[[kp, j]] / sigma2 * dir_p[[j, n]]).sum();
        for m in 0..mc {
            let weighted_other = weighted - gains[[kp, m]] / sigma2 * dir_p[[m, n]];
            dirderiv += sur.b_prime_hat[[kp, m, n]] / LN2 * weighted
                - sur.b_prime_bar[[kp, m, n]] / LN2 * weighted_other;
        }
    }
    for m in 0..mc {
        for n in 0..nc {
            // R_{k',m,n} / c^l has the limit log2(1 + SINR) as c^l -> 0; the
            // cached slope covers both cases.
            dirderiv += dir_c[[kp, m, n]] * sur.rate_coef_c[[kp, m, n]];
        }
    }
    for ((idx, &lambda), &c) in state.multipliers.indexed_iter().zip(state.assoc.iter()) {
        dirderiv -= dir_c[idx] * lambda * (1.0 - 2.0 * c);
    }

    let mut gamma = 1.0;
    let mut accepted = None;
    while gamma >= algo.gamma_floor {
        let powers = &state.powers + &(gamma * &dir_p);
        let assoc = &state.assoc + &(gamma * &dir_c);
        let trial = SolutionState { powers, assoc, ..state.clone() };
        let (z, _) = netmodel::objective_z(&trial, &gains, sigma2);
        if z - z0 >= algo.tau * gamma * dirderiv - 1e-12 {
            accepted = Some((trial, z, gamma));
            break;
        }
        gamma *= algo.zeta;
    }

    match accepted {
        Some((trial, z, gamma)) => {
            state.powers = trial.powers;
            state.assoc = trial.assoc;
            // Squash roundoff drift so the per-user sums stay exactly one
            // across many accepted steps.
            for k in 0..kc {
                let total: f64 = (0..mc)
                    .flat_map(|m| (0..nc).map(move |n| (m, n)))
                    .map(|(m, n)| state.assoc[[k, m, n]])
                    .sum();
                for m in 0..mc {
                    for n in 0..nc {
                        state.assoc[[k, m, n]] /= total;
                    }
                }
            }
            Ok(StepOutcome { gamma, dirderiv, z_after: z })
        }
        None => Ok(StepOutcome { gamma: 0.0, dirderiv, z_after: z0 }),
    }
}

pub struct InnerResult {
    pub z_final: f64,
    pub iterations: usize,
    pub hit_cap: bool,
}

/// Alternate positioning and resource allocation until the objective gain
/// drops below the inner threshold, both steps stall, or the cap is reached.
pub fn inner_loop(
    problem: &Problem,
    state: &mut SolutionState,
    options: RunOptions,
    outer: usize,
    trace: &mut Vec<IterationTrace>,
    mut inspector: Option<&mut Inspector<'_>>,
) -> Result<InnerResult, PdlioError> {
    let algo = &problem.algo;
    let (mut z_prev, _) = evaluate(problem, state)?;
    let started = Instant::now();
    let mut iterations = 0;
    let mut hit_cap = false;
    loop {
        iterations += 1;
        let pos_outcome = if options.optimize_positions {
            positioning_step(problem, state, outer, iterations, inspector.as_deref_mut())?
        } else {
            StepOutcome { gamma: 0.0, dirderiv: 0.0, z_after: z_prev }
        };
        let ra_outcome = ra_step(
            problem,
            state,
            options.freeze_assoc,
            outer,
            iterations,
            inspector.as_deref_mut(),
        )?;

        let z = ra_outcome.z_after;
        let (_, breakdown) = evaluate(problem, state)?;
        trace.push(IterationTrace {
            outer,
            inner: iterations,
            z,
            min_rate: breakdown.min_rate,
            max_violation: netmodel::max_violation(&state.assoc),
            gamma1: pos_outcome.gamma,
            gamma2: ra_outcome.gamma,
            bottleneck_user: breakdown.bottleneck_user,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        let stalled = (!options.optimize_positions || pos_outcome.gamma == 0.0)
            && ra_outcome.gamma == 0.0;
        if z - z_prev < algo.eps_inner || stalled {
            z_prev = z;
            break;
        }
        z_prev = z;
        if iterations >= algo.max_inner {
            hit_cap = true;
            break;
        }
    }
    Ok(InnerResult { z_final: z_prev, iterations, hit_cap })
}

/// Dual-style multiplier update. Returns (new multipliers, new mu, stepsize);
/// a zero stepsize signals an exactly binary association (outer loop done).
pub fn update_multipliers(
    multipliers: &Array3<f64>,
    assoc: &Array3<f64>,
    mu: f64,
    prev_max_violation: f64,
) -> (Array3<f64>, f64, f64) {
    let denom: f64 = assoc.iter().map(|&c| (c * (1.0 - c)).powi(2)).sum();
    if denom == 0.0 {
        return (multipliers.clone(), mu, 0.0);
    }
    let gamma = mu / denom;
    let mut updated = multipliers.clone();
    for (idx, &c) in assoc.indexed_iter() {
        updated[idx] += gamma * c * (1.0 - c);
    }
    let violation = netmodel::max_violation(assoc);
    let new_mu = if violation < prev_max_violation { mu } else { 2.0 * mu };
    (updated, new_mu, gamma)
}

pub fn run(
    problem: &Problem,
    initial: SolutionState,
    options: RunOptions,
) -> Result<RunReport, PdlioError> {
    run_with_inspector(problem, initial, options, None)
}

pub fn run_with_inspector(
    problem: &Problem,
    initial: SolutionState,
    options: RunOptions,
    mut inspector: Option<&mut Inspector<'_>>,
) -> Result<RunReport, PdlioError> {
    let algo = problem.algo.clone();
    let mut state = initial;
    let (_, initial_breakdown) = evaluate(problem, &state)?;
    let initial_min_rate = initial_breakdown.min_rate;

    let mut trace = Vec::new();
    let mut mu = algo.mu0;
    let mut prev_violation = f64::INFINITY;
    let mut outer_iterations = 0;
    let mut inner_total = 0;
    let mut converged = false;
    let mut z_final;

    loop {
        let inner =
            inner_loop(problem, &mut state, options, outer_iterations, &mut trace, inspector.as_deref_mut())?;
        inner_total += inner.iterations;
        z_final = inner.z_final;
        outer_iterations += 1;

        let violation = netmodel::max_violation(&state.assoc);
        if violation <= algo.eps_outer || !options.outer_loop {
            converged = violation <= algo.eps_outer;
            break;
        }
        if outer_iterations >= algo.max_outer {
            break;
        }
        let (updated, new_mu, gamma) =
            update_multipliers(&state.multipliers, &state.assoc, mu, prev_violation);
        if gamma == 0.0 {
            converged = true;
            break;
        }
        state.multipliers = updated;
        mu = new_mu;
        prev_violation = violation;
    }

    let max_violation_before = netmodel::max_violation(&state.assoc);
    let z_before_rounding = z_final;

    // Round the association to exactly binary and re-verify the assignment
    // constraints by greedy projection (a no-op when already binary).
    let evals = surrogate::channel_evals(
        &state.positions,
        &problem.users,
        &problem.regions_by_user,
        &problem.channel,
    )?;
    let gains = surrogate::gain_matrix(&evals);
    state.assoc = round_assoc(&state.assoc, &gains, &state, problem.channel.noise_power);
    let (z_after_rounding, breakdown) =
        netmodel::objective_z(&state, &gains, problem.channel.noise_power);

    Ok(RunReport {
        min_rate: breakdown.min_rate,
        rate_user: breakdown.rate_user,
        state,
        status: if converged { RunStatus::Converged } else { RunStatus::NotConverged },
        initial_min_rate,
        z_before_rounding,
        z_after_rounding,
        max_violation_before_rounding: max_violation_before,
        outer_iterations,
        inner_iterations_total: inner_total,
        trace,
    })
}

/// Binary projection of a near-binary association: each user takes its
/// largest-weight free (UAV, subcarrier) slot, ties broken by the achievable
/// rate slope and then by index.
fn round_assoc(
    assoc: &Array3<f64>,
    gains: &ndarray::Array2<f64>,
    state: &SolutionState,
    noise: f64,
) -> Array3<f64> {
    let (kc, mc, nc) = assoc.dim();
    let sinr = netmodel::sinr(&state.powers, gains, noise);
    let mut taken = vec![vec![false; nc]; mc];
    let mut out = Array3::zeros((kc, mc, nc));
    for k in 0..kc {
        let mut slots: Vec<(usize, usize)> =
            (0..mc).flat_map(|m| (0..nc).map(move |n| (m, n))).collect();
        slots.sort_by(|&(m1, n1), &(m2, n2)| {
            assoc[[k, m2, n2]]
                .total_cmp(&assoc[[k, m1, n1]])
                .then(sinr[[k, m2, n2]].total_cmp(&sinr[[k, m1, n1]]))
                .then((m1, n1).cmp(&(m2, n2)))
        });
        for (m, n) in slots {
            if !taken[m][n] {
                taken[m][n] = true;
                out[[k, m, n]] = 1.0;
                break;
            }
        }
    }
    out
}

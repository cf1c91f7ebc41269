//! Concave surrogate construction for the two alternating blocks: UAV
//! positioning (diagonal-quadratic-plus-linear per-user rate bounds around the
//! current positions) and resource allocation (log-concave-in-power terms with
//! linearized interference and a linear penalty lower bound).
//!
//! All Taylor coefficients are cached on the surrogate structs so tests can
//! verify them directly. Rates are in bits/s/Hz, so every first-order
//! coefficient of a log2 term carries a 1/ln2 factor.

use crate::channel::{self, ChannelError, ChannelEval, ChannelParams};
use crate::geometry::BlockedRegion;
use crate::netmodel::SolutionState;
use crate::subsolver::{LinearConstraint, LogTerm, Piece};
use nalgebra::{DVector, Vector3};
use ndarray::{Array2, Array3};
use thiserror::Error;

const LN2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("UAV {0} and UAV {1} occupy the same position; separation cannot be linearized")]
    CoincidentPositions(usize, usize),
}

/// Flat index of power variable p_{m,n}.
pub fn p_index(m: usize, n: usize, n_count: usize) -> usize {
    m * n_count + n
}

/// Flat index of association variable c_{k,m,n}, after all power variables.
pub fn c_index(k: usize, m: usize, n: usize, m_count: usize, n_count: usize) -> usize {
    m_count * n_count + (k * m_count + m) * n_count + n
}

pub fn flatten_positions(positions: &[Vector3<f64>]) -> Vec<f64> {
    positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}

pub fn unflatten_positions(flat: &[f64]) -> Vec<Vector3<f64>> {
    flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect()
}

pub fn pack_allocation(powers: &Array2<f64>, assoc: &Array3<f64>) -> Vec<f64> {
    let mut out: Vec<f64> = powers.iter().copied().collect();
    out.extend(assoc.iter().copied());
    out
}

pub fn unpack_allocation(
    flat: &[f64],
    k_count: usize,
    m_count: usize,
    n_count: usize,
) -> (Array2<f64>, Array3<f64>) {
    let split = m_count * n_count;
    let powers = Array2::from_shape_vec((m_count, n_count), flat[..split].to_vec()).unwrap();
    let assoc =
        Array3::from_shape_vec((k_count, m_count, n_count), flat[split..].to_vec()).unwrap();
    (powers, assoc)
}

/// Channel evaluations for every (user, UAV) pair.
pub fn channel_evals(
    positions: &[Vector3<f64>],
    users: &[Vector3<f64>],
    regions_by_user: &[Vec<BlockedRegion>],
    params: &ChannelParams,
) -> Result<Vec<Vec<ChannelEval>>, ChannelError> {
    users
        .iter()
        .enumerate()
        .map(|(k, u)| {
            positions.iter().map(|x| channel::gain(x, u, &regions_by_user[k], params)).collect()
        })
        .collect()
}

/// K x M gain matrix extracted from per-pair evaluations.
pub fn gain_matrix(evals: &[Vec<ChannelEval>]) -> Array2<f64> {
    let k_count = evals.len();
    let m_count = evals[0].len();
    Array2::from_shape_fn((k_count, m_count), |(k, m)| evals[k][m].gain)
}

/// Concave model of the penalized min-rate objective as a function of the M
/// UAV positions (3M flat coordinates), at fixed power and association.
pub struct PositioningSurrogate {
    /// c^l / (1 + total received power over noise), per (k, m, n).
    pub b_hat: Array3<f64>,
    /// c^l / (1 + interference over noise), per (k, m, n).
    pub b_bar: Array3<f64>,
    /// Curvature alpha*beta / (2 d^(2+alpha)) of the concave gain model, per (k, m).
    pub a_coef: Array2<f64>,
    /// Gain-gradient correction (exact gradient minus distance-model gradient), per [k][m].
    pub delta: Vec<Vec<Vector3<f64>>>,
    /// Exact gain gradients at the expansion point, per [k][m].
    pub grad_gain: Vec<Vec<Vector3<f64>>>,
    /// c^l log2(1 + signal-plus-interference over noise) at the expansion point.
    pub r_hat_const: Array3<f64>,
    /// c^l log2(1 + interference over noise) at the expansion point.
    pub r_bar_const: Array3<f64>,
    /// Penalty term (a constant here: association is frozen in this block).
    pub rho_const: f64,
    /// Flat expansion positions.
    pub expansion: Vec<f64>,
    /// One concave piece per user over the 3M coordinates; the minimum of
    /// these is the surrogate objective (rho_const is folded into each
    /// piece's constant, which commutes with the min).
    pub pieces: Vec<Piece>,
}

impl PositioningSurrogate {
    pub fn value(&self, flat_x: &[f64]) -> f64 {
        self.pieces.iter().map(|p| p.value(flat_x)).fold(f64::INFINITY, f64::min)
    }

    /// Gradient of the surrogate at a point where the bottleneck is unique:
    /// the gradient of the minimizing piece.
    pub fn gradient(&self, flat_x: &[f64]) -> DVector<f64> {
        let (best, _) = self
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.value(flat_x)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let mut g = DVector::zeros(flat_x.len());
        self.pieces[best].gradient(flat_x, &mut g);
        g
    }
}

pub fn build_positioning_surrogate(
    state: &SolutionState,
    users: &[Vector3<f64>],
    evals: &[Vec<ChannelEval>],
    params: &ChannelParams,
) -> PositioningSurrogate {
    let (k_count, m_count, n_count) = state.assoc.dim();
    let sigma2 = params.noise_power;
    let gains = gain_matrix(evals);

    let mut b_hat = Array3::zeros((k_count, m_count, n_count));
    let mut b_bar = Array3::zeros((k_count, m_count, n_count));
    let mut r_hat_const = Array3::zeros((k_count, m_count, n_count));
    let mut r_bar_const = Array3::zeros((k_count, m_count, n_count));
    for k in 0..k_count {
        for n in 0..n_count {
            let total: f64 = (0..m_count).map(|j| state.powers[[j, n]] * gains[[k, j]]).sum();
            for m in 0..m_count {
                let interf = total - state.powers[[m, n]] * gains[[k, m]];
                let c = state.assoc[[k, m, n]];
                b_hat[[k, m, n]] = c / (1.0 + total / sigma2);
                b_bar[[k, m, n]] = c / (1.0 + interf / sigma2);
                r_hat_const[[k, m, n]] = c * (1.0 + total / sigma2).log2();
                r_bar_const[[k, m, n]] = c * (1.0 + interf / sigma2).log2();
            }
        }
    }

    let mut a_coef = Array2::zeros((k_count, m_count));
    let mut delta = vec![vec![Vector3::zeros(); m_count]; k_count];
    let mut grad_gain = vec![vec![Vector3::zeros(); m_count]; k_count];
    for k in 0..k_count {
        for m in 0..m_count {
            let ev = &evals[k][m];
            let diff = state.positions[m] - users[k];
            let d2 = diff.norm_squared();
            let d = d2.sqrt();
            a_coef[[k, m]] = ev.alpha * ev.beta / (2.0 * d.powf(2.0 + ev.alpha));
            // Gradient of the pure distance model beta * d^(-alpha) with the
            // propagation parameters frozen at the expansion point.
            let grad_model = -ev.gain * ev.alpha * diff / d2;
            delta[k][m] = ev.grad_gain - grad_model;
            grad_gain[k][m] = ev.grad_gain;
        }
    }

    let rho_const = crate::netmodel::penalty(&state.assoc, &state.multipliers);

    let dim = 3 * m_count;
    let mut pieces = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut quad = vec![0.0; dim];
        let mut lin = vec![0.0; dim];
        let mut constant = rho_const;
        for (m, n) in iter_mn(m_count, n_count) {
            constant += r_hat_const[[k, m, n]] - r_bar_const[[k, m, n]];
        }
        for j in 0..m_count {
            // Sensitivity of user k's surrogate rate to the gain of UAV j,
            // split into the signal-plus-interference and interference logs.
            let mut s_hat = 0.0;
            let mut s_bar = 0.0;
            for n in 0..n_count {
                let p = state.powers[[j, n]] / sigma2;
                for m in 0..m_count {
                    s_hat += b_hat[[k, m, n]] * p;
                    if m != j {
                        s_bar += b_bar[[k, m, n]] * p;
                    }
                }
            }
            s_hat /= LN2;
            s_bar /= LN2;

            let u = users[k];
            let xl = state.positions[j];
            let a = a_coef[[k, j]];
            let d2 = (xl - u).norm_squared();
            let del = delta[k][j];
            let gg = grad_gain[k][j];
            for axis in 0..3 {
                let i = 3 * j + axis;
                quad[i] = -s_hat * a;
                lin[i] = s_hat * (2.0 * a * u[axis] + del[axis]) - s_bar * gg[axis];
            }
            constant += s_hat * (a * (d2 - u.norm_squared()) - del.dot(&xl)) + s_bar * gg.dot(&xl);
        }
        pieces.push(Piece::Quad { quad, lin, constant });
    }

    PositioningSurrogate {
        b_hat,
        b_bar,
        a_coef,
        delta,
        grad_gain,
        r_hat_const,
        r_bar_const,
        rho_const,
        expansion: flatten_positions(&state.positions),
        pieces,
    }
}

/// Linearized pairwise-separation constraints over the 3M flat coordinates:
/// 2 (x_m^l - x_j^l)' (x_m - x_j) - ||x_m^l - x_j^l||^2 >= d_min^2, written in
/// a' z <= b form. At the expansion point this reduces to the true
/// constraint, and it lower-bounds the true squared distance everywhere.
pub fn linearize_separation(
    positions: &[Vector3<f64>],
    d_min: f64,
) -> Result<Vec<LinearConstraint>, SurrogateError> {
    let m_count = positions.len();
    let mut out = Vec::new();
    for m in 0..m_count {
        for j in (m + 1)..m_count {
            let diff = positions[m] - positions[j];
            if diff.norm_squared() == 0.0 {
                return Err(SurrogateError::CoincidentPositions(m, j));
            }
            let mut coeffs = Vec::with_capacity(6);
            for axis in 0..3 {
                coeffs.push((3 * m + axis, -2.0 * diff[axis]));
                coeffs.push((3 * j + axis, 2.0 * diff[axis]));
            }
            out.push(LinearConstraint { coeffs, rhs: -(d_min * d_min + diff.norm_squared()) });
        }
    }
    Ok(out)
}

/// Concave model of the penalized min-rate objective as a function of powers
/// and associations (MN + KMN flat coordinates), at fixed positions.
pub struct RaSurrogate {
    /// c^l / (1 + total received power over noise), per (k, m, n).
    pub b_prime_hat: Array3<f64>,
    /// c^l / (1 + interference over noise), per (k, m, n).
    pub b_prime_bar: Array3<f64>,
    /// log2(1 + SINR) at the expansion powers; the linear-in-c rate slope.
    pub rate_coef_c: Array3<f64>,
    /// lambda (2 c^l - 1): linear coefficients of the penalty lower bound.
    pub penalty_lin: Array3<f64>,
    /// -sum lambda (c^l)^2: constant of the penalty lower bound.
    pub penalty_const: f64,
    pub gains: Array2<f64>,
    pub noise: f64,
    pub expansion_powers: Array2<f64>,
    pub expansion_assoc: Array3<f64>,
    /// One concave piece per user; the surrogate is min over pieces + extra.
    pub pieces: Vec<Piece>,
    /// Penalty lower bound, linear in c, added outside the min.
    pub extra: Piece,
    pub dim: usize,
}

impl RaSurrogate {
    pub fn value(&self, flat: &[f64]) -> f64 {
        let min = self.pieces.iter().map(|p| p.value(flat)).fold(f64::INFINITY, f64::min);
        min + self.extra.value(flat)
    }

    pub fn gradient(&self, flat: &[f64]) -> DVector<f64> {
        let (best, _) = self
            .pieces
            .iter()
            .enumerate()
            .map(|(i, p)| (i, p.value(flat)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let mut g = DVector::zeros(flat.len());
        self.pieces[best].gradient(flat, &mut g);
        let mut ge = DVector::zeros(flat.len());
        self.extra.gradient(flat, &mut ge);
        g + ge
    }

    /// Linear upper bound on the interference log at given powers.
    pub fn r_bar_ub(&self, k: usize, m: usize, n: usize, powers: &Array2<f64>) -> f64 {
        let m_count = powers.shape()[0];
        let mut v = self.expansion_assoc[[k, m, n]]
            * (1.0 + self.interference(k, m, n, &self.expansion_powers) / self.noise).log2();
        let b = self.b_prime_bar[[k, m, n]] / LN2;
        for j in 0..m_count {
            if j != m {
                v += b * self.gains[[k, j]] / self.noise
                    * (powers[[j, n]] - self.expansion_powers[[j, n]]);
            }
        }
        v
    }

    /// Exact interference log c^l log2(1 + I/noise) at given powers.
    pub fn r_bar_exact(&self, k: usize, m: usize, n: usize, powers: &Array2<f64>) -> f64 {
        self.expansion_assoc[[k, m, n]] * (1.0 + self.interference(k, m, n, powers) / self.noise).log2()
    }

    fn interference(&self, k: usize, m: usize, n: usize, powers: &Array2<f64>) -> f64 {
        (0..powers.shape()[0])
            .filter(|&j| j != m)
            .map(|j| powers[[j, n]] * self.gains[[k, j]])
            .sum()
    }

    /// Linear lower bound on the penalty term at a given association.
    pub fn rho_lb(&self, assoc: &Array3<f64>) -> f64 {
        self.penalty_const
            + self.penalty_lin.iter().zip(assoc.iter()).map(|(&l, &c)| l * c).sum::<f64>()
    }
}

pub fn build_ra_surrogate(state: &SolutionState, gains: &Array2<f64>, noise: f64) -> RaSurrogate {
    let (k_count, m_count, n_count) = state.assoc.dim();
    let dim = m_count * n_count + k_count * m_count * n_count;

    let mut b_prime_hat = Array3::zeros((k_count, m_count, n_count));
    let mut b_prime_bar = Array3::zeros((k_count, m_count, n_count));
    let mut rate_coef_c = Array3::zeros((k_count, m_count, n_count));
    for k in 0..k_count {
        for n in 0..n_count {
            let total: f64 = (0..m_count).map(|j| state.powers[[j, n]] * gains[[k, j]]).sum();
            for m in 0..m_count {
                let interf = total - state.powers[[m, n]] * gains[[k, m]];
                let c = state.assoc[[k, m, n]];
                b_prime_hat[[k, m, n]] = c / (1.0 + total / noise);
                b_prime_bar[[k, m, n]] = c / (1.0 + interf / noise);
                let sinr = state.powers[[m, n]] * gains[[k, m]] / (interf + noise);
                rate_coef_c[[k, m, n]] = (1.0 + sinr).log2();
            }
        }
    }

    let mut penalty_lin = Array3::zeros((k_count, m_count, n_count));
    let mut penalty_const = 0.0;
    for ((idx, &lambda), &c) in
        state.multipliers.indexed_iter().zip(state.assoc.iter())
    {
        penalty_lin[idx] = lambda * (2.0 * c - 1.0);
        penalty_const -= lambda * c * c;
    }

    let mut pieces = Vec::with_capacity(k_count);
    for k in 0..k_count {
        let mut terms = Vec::new();
        for n in 0..n_count {
            let coef: f64 = (0..m_count).map(|m| state.assoc[[k, m, n]]).sum();
            if coef > 0.0 {
                let weights =
                    (0..m_count).map(|j| (p_index(j, n, n_count), gains[[k, j]] / noise)).collect();
                terms.push(LogTerm { coef, bias: 1.0, weights });
            }
        }
        let mut lin_map = vec![0.0; dim];
        let mut constant = 0.0;
        for (m, n) in iter_mn(m_count, n_count) {
            let b = b_prime_bar[[k, m, n]] / LN2;
            for j in 0..m_count {
                if j != m {
                    let w = gains[[k, j]] / noise;
                    lin_map[p_index(j, n, n_count)] -= b * w;
                    constant += b * w * state.powers[[j, n]];
                }
            }
            lin_map[c_index(k, m, n, m_count, n_count)] += rate_coef_c[[k, m, n]];
            // Subtract the full-log constant; together with the linear-in-c
            // term this pins the surrogate to the exact rate at the
            // expansion point.
            let total: f64 = (0..m_count).map(|j| state.powers[[j, n]] * gains[[k, j]]).sum();
            constant -= state.assoc[[k, m, n]] * (1.0 + total / noise).log2();
        }
        let lin: Vec<(usize, f64)> =
            lin_map.iter().enumerate().filter(|(_, &w)| w != 0.0).map(|(i, &w)| (i, w)).collect();
        pieces.push(Piece::LogSum { terms, lin, constant });
    }

    let mut extra_lin = vec![0.0; dim];
    for (k, m, n) in iter_kmn(k_count, m_count, n_count) {
        extra_lin[c_index(k, m, n, m_count, n_count)] = penalty_lin[[k, m, n]];
    }
    let extra = Piece::Quad { quad: vec![0.0; dim], lin: extra_lin, constant: penalty_const };

    RaSurrogate {
        b_prime_hat,
        b_prime_bar,
        rate_coef_c,
        penalty_lin,
        penalty_const,
        gains: gains.clone(),
        noise,
        expansion_powers: state.powers.clone(),
        expansion_assoc: state.assoc.clone(),
        pieces,
        extra,
        dim,
    }
}

/// Feasible set of the resource-allocation block in flat coordinates:
/// per-UAV power budgets, per-subcarrier exclusivity, one association per
/// user, and unit-interval bounds on associations.
pub struct RaConstraints {
    pub lin_ineq: Vec<LinearConstraint>,
    pub lin_eq: Vec<LinearConstraint>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

pub fn ra_constraints(
    k_count: usize,
    m_count: usize,
    n_count: usize,
    p_max: f64,
) -> RaConstraints {
    let dim = m_count * n_count + k_count * m_count * n_count;
    let mut lin_ineq = Vec::new();
    for m in 0..m_count {
        lin_ineq.push(LinearConstraint {
            coeffs: (0..n_count).map(|n| (p_index(m, n, n_count), 1.0)).collect(),
            rhs: p_max,
        });
    }
    // Exclusivity rows sum_k c <= 1 are implied with equality by the per-user
    // rows when K = M*N (counting argument), so they carry zero slack at
    // every feasible point and must be omitted for the barrier.
    if k_count < m_count * n_count {
        for (m, n) in iter_mn(m_count, n_count) {
            lin_ineq.push(LinearConstraint {
                coeffs: (0..k_count).map(|k| (c_index(k, m, n, m_count, n_count), 1.0)).collect(),
                rhs: 1.0,
            });
        }
    }
    let lin_eq = (0..k_count)
        .map(|k| LinearConstraint {
            coeffs: iter_mn(m_count, n_count)
                .map(|(m, n)| (c_index(k, m, n, m_count, n_count), 1.0))
                .collect(),
            rhs: 1.0,
        })
        .collect();
    let mut lower = vec![0.0; dim];
    let mut upper = vec![f64::INFINITY; dim];
    for i in m_count * n_count..dim {
        lower[i] = 0.0;
        upper[i] = 1.0;
    }
    RaConstraints { lin_ineq, lin_eq, lower, upper }
}

/// Strictly interior allocation: half the budget spread evenly, uniform
/// fractional association.
pub fn ra_interior_hint(k_count: usize, m_count: usize, n_count: usize, p_max: f64) -> Vec<f64> {
    let mut out = vec![p_max / (2.0 * n_count as f64); m_count * n_count];
    out.extend(vec![1.0 / (m_count * n_count) as f64; k_count * m_count * n_count]);
    out
}

fn iter_mn(m_count: usize, n_count: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..m_count).flat_map(move |m| (0..n_count).map(move |n| (m, n)))
}

fn iter_kmn(
    k_count: usize,
    m_count: usize,
    n_count: usize,
) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..k_count).flat_map(move |k| iter_mn(m_count, n_count).map(move |(m, n)| (k, m, n)))
}

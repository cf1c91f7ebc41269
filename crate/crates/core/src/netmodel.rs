//! SINR, per-user rates, max-min objective, and the penalty term of the
//! relaxed problem. Rates are in bits/s/Hz (log base 2) throughout.

use nalgebra::Vector3;
use ndarray::{Array2, Array3};

/// Joint decision variables plus the penalty multipliers.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionState {
    /// UAV positions, meters.
    pub positions: Vec<Vector3<f64>>,
    /// Transmit powers, M x N, watts.
    pub powers: Array2<f64>,
    /// Association weights in [0, 1], K x M x N.
    pub assoc: Array3<f64>,
    /// Penalty multipliers, K x M x N, nonnegative.
    pub multipliers: Array3<f64>,
}

impl SolutionState {
    pub fn num_uavs(&self) -> usize {
        self.positions.len()
    }

    pub fn num_users(&self) -> usize {
        self.assoc.shape()[0]
    }

    pub fn num_subcarriers(&self) -> usize {
        self.powers.shape()[1]
    }
}

/// Rate decomposition for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct RateBreakdown {
    pub sinr: Array3<f64>,
    pub rate_kmn: Array3<f64>,
    pub rate_user: Vec<f64>,
    pub min_rate: f64,
    pub bottleneck_user: usize,
}

/// Association weights below this are treated as exactly zero in the rate;
/// the rate is linear in c so this is exact.
pub const ASSOC_ZERO_TOL: f64 = 1e-12;

/// SINR_{k,m,n} = p_{m,n} g_k(x_m) / (sum_{j != m} p_{j,n} g_k(x_j) + noise).
pub fn sinr(powers: &Array2<f64>, gains: &Array2<f64>, noise_power: f64) -> Array3<f64> {
    let (k_count, m_count) = (gains.shape()[0], gains.shape()[1]);
    let n_count = powers.shape()[1];
    let mut out = Array3::zeros((k_count, m_count, n_count));
    for k in 0..k_count {
        for n in 0..n_count {
            // Total received power on subcarrier n at user k.
            let total: f64 = (0..m_count).map(|j| powers[[j, n]] * gains[[k, j]]).sum();
            for m in 0..m_count {
                let signal = powers[[m, n]] * gains[[k, m]];
                out[[k, m, n]] = signal / (total - signal + noise_power);
            }
        }
    }
    out
}

/// Per-user rates and the max-min statistics. Bottleneck ties break toward
/// the lowest user index.
pub fn rates(state: &SolutionState, gains: &Array2<f64>, noise_power: f64) -> RateBreakdown {
    let sinr = sinr(&state.powers, gains, noise_power);
    let mut rate_kmn = Array3::zeros(sinr.raw_dim());
    let (k_count, m_count, n_count) = sinr.dim();
    let mut rate_user = vec![0.0; k_count];
    for k in 0..k_count {
        for m in 0..m_count {
            for n in 0..n_count {
                let c = state.assoc[[k, m, n]];
                if c > ASSOC_ZERO_TOL {
                    let r = c * (1.0 + sinr[[k, m, n]]).log2();
                    rate_kmn[[k, m, n]] = r;
                    rate_user[k] += r;
                }
            }
        }
    }
    let mut bottleneck_user = 0;
    for k in 1..k_count {
        if rate_user[k] < rate_user[bottleneck_user] {
            bottleneck_user = k;
        }
    }
    let min_rate = rate_user[bottleneck_user];
    RateBreakdown { sinr, rate_kmn, rate_user, min_rate, bottleneck_user }
}

/// Penalty rho(Lambda, C) = -sum lambda * c * (1 - c); always <= 0 on [0, 1].
pub fn penalty(assoc: &Array3<f64>, multipliers: &Array3<f64>) -> f64 {
    assoc
        .iter()
        .zip(multipliers.iter())
        .map(|(&c, &lambda)| -lambda * c * (1.0 - c))
        .sum()
}

/// Penalized objective Z = min_k R_k + rho(Lambda, C), with rate breakdown.
pub fn objective_z(state: &SolutionState, gains: &Array2<f64>, noise_power: f64) -> (f64, RateBreakdown) {
    let breakdown = rates(state, gains, noise_power);
    let z = breakdown.min_rate + penalty(&state.assoc, &state.multipliers);
    (z, breakdown)
}

/// Maximum binariness violation max c(1-c); the outer-loop stopping statistic.
pub fn max_violation(assoc: &Array3<f64>) -> f64 {
    assoc.iter().map(|&c| c * (1.0 - c)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_link_state(p: f64, c: f64) -> SolutionState {
        SolutionState {
            positions: vec![Vector3::new(0.0, 0.0, 100.0)],
            powers: arr2(&[[p]]),
            assoc: Array3::from_elem((1, 1, 1), c),
            multipliers: Array3::zeros((1, 1, 1)),
        }
    }

    #[test]
    fn single_uav_sinr_has_no_interference() {
        let gains = arr2(&[[2e-9]]);
        let s = sinr(&arr2(&[[1.0]]), &gains, 2e-14);
        assert_relative_eq!(s[[0, 0, 0]], 2e-9 / 2e-14, max_relative = 1e-12);
        let s0 = sinr(&arr2(&[[0.0]]), &gains, 2e-14);
        assert_eq!(s0[[0, 0, 0]], 0.0);
    }

    #[test]
    fn symmetric_two_uav_sinr() {
        let (p, g, noise) = (0.5, 3e-9, 2e-14);
        let gains = arr2(&[[g, g]]);
        let powers = arr2(&[[p], [p]]);
        let s = sinr(&powers, &gains, noise);
        let expected = p * g / (p * g + noise);
        assert_relative_eq!(s[[0, 0, 0]], expected, max_relative = 1e-12);
        assert_relative_eq!(s[[0, 1, 0]], expected, max_relative = 1e-12);
    }

    #[test]
    fn single_link_rate_closed_form() {
        let state = single_link_state(1.0, 1.0);
        let gains = arr2(&[[2e-9]]);
        let noise = 2e-14;
        let b = rates(&state, &gains, noise);
        assert_relative_eq!(b.min_rate, (1.0f64 + 2e-9 / 2e-14).log2(), max_relative = 1e-12);
        // Fractional c halves the term.
        let half = rates(&single_link_state(1.0, 0.5), &gains, noise);
        assert_relative_eq!(half.min_rate, b.min_rate / 2.0, max_relative = 1e-12);
        // All-zero association gives zero rate.
        let zero = rates(&single_link_state(1.0, 0.0), &gains, noise);
        assert_eq!(zero.min_rate, 0.0);
    }

    #[test]
    fn penalty_examples() {
        let binary = Array3::from_shape_fn((2, 2, 2), |(k, m, n)| ((k + m + n) % 2) as f64);
        let lambda = Array3::from_elem((2, 2, 2), 3.0);
        assert_eq!(penalty(&binary, &lambda), 0.0);
        let mut c = Array3::zeros((1, 1, 1));
        c[[0, 0, 0]] = 0.5;
        let mut l = Array3::zeros((1, 1, 1));
        l[[0, 0, 0]] = 4.0;
        assert_relative_eq!(penalty(&c, &l), -1.0, max_relative = 1e-15);
    }

    #[test]
    fn penalty_matches_reordered_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Array3::from_shape_fn((4, 3, 5), |_| rng.random_range(0.0..1.0));
        let l = Array3::from_shape_fn((4, 3, 5), |_| rng.random_range(0.0..5.0));
        let fast = penalty(&c, &l);
        // Independently ordered summation: reversed index order.
        let mut slow = 0.0;
        for n in (0..5).rev() {
            for m in (0..3).rev() {
                for k in (0..4).rev() {
                    slow -= l[[k, m, n]] * c[[k, m, n]] * (1.0 - c[[k, m, n]]);
                }
            }
        }
        assert!((fast - slow).abs() <= 1e-12);
    }

    #[test]
    fn objective_reduces_to_min_rate_for_binary_or_zero_lambda() {
        let gains = arr2(&[[2e-9]]);
        let noise = 2e-14;
        let state = single_link_state(1.0, 1.0);
        let (z, b) = objective_z(&state, &gains, noise);
        assert_eq!(z, b.min_rate);
        // Lambda = 0: fractional C does not change Z.
        let frac = single_link_state(1.0, 0.4);
        let (z, b) = objective_z(&frac, &gains, noise);
        assert_eq!(z, b.min_rate);
    }

    #[test]
    fn max_violation_examples() {
        let binary = Array3::from_shape_fn((2, 2, 2), |(k, m, n)| ((k * m + n) % 2) as f64);
        assert_eq!(max_violation(&binary), 0.0);
        let mut c = binary.clone();
        c[[0, 0, 0]] = 0.5;
        assert_eq!(max_violation(&c), 0.25);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = Array3::from_shape_fn((3, 3, 3), |_| rng.random_range(0.0..1.0));
        let brute = r.iter().map(|&c| c * (1.0 - c)).fold(0.0f64, f64::max);
        assert_eq!(max_violation(&r), brute);
    }

    #[test]
    fn sinr_is_scale_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gains = Array2::from_shape_fn((3, 2), |_| rng.random_range(1e-10..1e-8));
        let powers = Array2::from_shape_fn((2, 4), |_| rng.random_range(0.0..1.0));
        let noise = 2e-14;
        let a = sinr(&powers, &gains, noise);
        let b = sinr(&(&powers * 7.5), &gains, noise * 7.5);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_relative_eq!(x, y, max_relative = 1e-12);
        }
    }

    #[test]
    fn rates_invariant_under_subcarrier_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let gains = Array2::from_shape_fn((2, 2), |_| rng.random_range(1e-10..1e-8));
        let powers = Array2::from_shape_fn((2, 3), |_| rng.random_range(0.0..0.5));
        let assoc = Array3::from_shape_fn((2, 2, 3), |_| rng.random_range(0.0..0.5));
        let state = SolutionState {
            positions: vec![Vector3::zeros(); 2],
            powers: powers.clone(),
            assoc: assoc.clone(),
            multipliers: Array3::zeros((2, 2, 3)),
        };
        let perm = [2usize, 0, 1];
        let state_p = SolutionState {
            positions: state.positions.clone(),
            powers: Array2::from_shape_fn((2, 3), |(m, n)| powers[[m, perm[n]]]),
            assoc: Array3::from_shape_fn((2, 2, 3), |(k, m, n)| assoc[[k, m, perm[n]]]),
            multipliers: Array3::zeros((2, 2, 3)),
        };
        let noise = 2e-14;
        let a = rates(&state, &gains, noise);
        let b = rates(&state_p, &gains, noise);
        for k in 0..2 {
            assert_relative_eq!(a.rate_user[k], b.rate_user[k], max_relative = 1e-12);
        }
    }
}

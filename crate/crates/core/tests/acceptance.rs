//! Acceptance gate: end-to-end checks of the full pipeline, from the
//! blockage geometry up through the benchmark harness. Each test covers one
//! criterion and prints a single PASS line (visible with `--nocapture`).

use std::time::Instant;

use nalgebra::{DVector, Vector3};
use ndarray::{Array2, Array3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use uavbs_core::channel::{gain, ChannelParams};
use uavbs_core::geometry::{los_oracle, min_clearance, regions_for_user, Building};
use uavbs_core::netmodel::{self, SolutionState};
use uavbs_core::pdlio::{self, InspectEvent, Inspector, RunOptions, RunStatus};
use uavbs_core::scenario::{monte_carlo, BenchmarkScheme, Scenario};
use uavbs_core::subsolver::{
    solve_maximin, MaximinProblem, Piece, DEFAULT_MAX_ITER, DEFAULT_TOL_FEAS, DEFAULT_TOL_KKT,
};
use uavbs_core::surrogate::channel_evals;

const AREA: f64 = 1500.0;

/// Dense-urban scene: ~60 random boxes, heights 10-96 m, in a 1500x1500 m
/// area.
fn random_buildings(rng: &mut ChaCha8Rng) -> Vec<Building> {
    (0..60)
        .map(|_| {
            let sx = rng.random_range(30.0..90.0);
            let sy = rng.random_range(30.0..90.0);
            Building::new(
                Vector3::new(
                    rng.random_range(0.0..AREA - sx),
                    rng.random_range(0.0..AREA - sy),
                    0.0,
                ),
                Vector3::new(sx, sy, rng.random_range(10.0..96.0)),
            )
        })
        .collect()
}

fn building_json(buildings: &[Building]) -> serde_json::Value {
    json!(buildings
        .iter()
        .map(|b| json!({
            "min": [b.min_corner.x, b.min_corner.y, b.min_corner.z],
            "size": [b.size.x, b.size.y, b.size.z],
        }))
        .collect::<Vec<_>>())
}

/// Scenario with default table parameters, random buildings, and randomly
/// sampled users.
fn urban_scenario(k: usize, m: usize, n: usize, seed: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1d6);
    let buildings = random_buildings(&mut rng);
    let config = json!({
        "counts": { "k": k, "m": m, "n": n },
        "buildings": building_json(&buildings),
        "user_count": k,
        "seed": seed,
    });
    Scenario::from_json(&config.to_string()).expect("scenario builds")
}

fn user_outside_footprints(rng: &mut ChaCha8Rng, buildings: &[Building]) -> Vector3<f64> {
    loop {
        let candidate =
            Vector3::new(rng.random_range(0.0..AREA), rng.random_range(0.0..AREA), 0.0);
        if buildings.iter().all(|b| !b.footprint_contains(&candidate)) {
            return candidate;
        }
    }
}

#[test]
fn polyhedral_los_classification_matches_segment_oracle() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(301);
    let mut kept = 0;
    while kept < 1000 {
        let buildings = random_buildings(&mut rng);
        let user = user_outside_footprints(&mut rng, &buildings);
        let regions = regions_for_user(&user, 0, &buildings).unwrap();
        for _ in 0..10 {
            let probe = Vector3::new(
                rng.random_range(0.0..AREA),
                rng.random_range(0.0..AREA),
                rng.random_range(100.0..600.0),
            );
            let clearance = min_clearance(&regions, &probe).expect("buildings present").value;
            if clearance.abs() / (probe - user).norm() < 1e-9 {
                continue; // boundary sample: both classifiers are ambiguous
            }
            let los_polyhedral = clearance > 0.0;
            let los_segment = los_oracle(&user, &probe, &buildings);
            assert_eq!(
                los_polyhedral, los_segment,
                "user {user:?} probe {probe:?} clearance {clearance}"
            );
            kept += 1;
            if kept == 1000 {
                break;
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "classification suite took {elapsed:.2}s");
    println!("PASS los-classification: 1000/1000 samples agree with segment oracle ({elapsed:.2}s)");
}

#[test]
fn channel_gradients_match_central_differences() {
    let start = Instant::now();
    let params = ChannelParams::defaults();
    let mut rng = ChaCha8Rng::seed_from_u64(302);
    let buildings = random_buildings(&mut rng);
    let user = user_outside_footprints(&mut rng, &buildings);
    let regions = regions_for_user(&user, 0, &buildings).unwrap();
    let h = 1e-4;
    let mut checked = 0;
    while checked < 100 {
        let x = Vector3::new(
            rng.random_range(0.0..AREA),
            rng.random_range(0.0..AREA),
            rng.random_range(100.0..600.0),
        );
        let eval = gain(&x, &user, &regions, &params).unwrap();
        // Degenerate points: active-plane ties (subgradient only) and a
        // saturated sigmoid (the parameter derivatives vanish below the
        // truncation error of the difference quotient).
        if eval.tie || eval.s * (1.0 - eval.s) < 1e-5 {
            continue;
        }
        let mut fd_gain = Vector3::zeros();
        let mut fd_alpha = Vector3::zeros();
        let mut fd_beta = Vector3::zeros();
        let mut kink = false;
        for i in 0..3 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let ep = gain(&xp, &user, &regions, &params).unwrap();
            let em = gain(&xm, &user, &regions, &params).unwrap();
            // A different plane attaining the clearance minimum inside the
            // stencil makes the difference quotient straddle a kink.
            if ep.active_plane != eval.active_plane || em.active_plane != eval.active_plane {
                kink = true;
                break;
            }
            fd_gain[i] = (ep.gain - em.gain) / (2.0 * h);
            fd_alpha[i] = (ep.alpha - em.alpha) / (2.0 * h);
            fd_beta[i] = (ep.beta - em.beta) / (2.0 * h);
        }
        if kink {
            continue;
        }
        assert!(
            (eval.grad_gain - fd_gain).norm() <= 1e-5 * fd_gain.norm().max(1e-300),
            "x {x:?} s {} grad {:?} fd {fd_gain:?}",
            eval.s,
            eval.grad_gain
        );
        assert!(
            (eval.grad_alpha - fd_alpha).norm() <= 1e-5 * fd_alpha.norm().max(1e-12),
            "x {x:?} s {} grad {:?} fd {fd_alpha:?}",
            eval.s,
            eval.grad_alpha
        );
        assert!(
            (eval.grad_beta - fd_beta).norm() <= 1e-5 * fd_beta.norm().max(1e-18),
            "x {x:?} s {} grad {:?} fd {fd_beta:?}",
            eval.s,
            eval.grad_beta
        );
        checked += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "gradient suite took {elapsed:.2}s");
    println!("PASS channel-gradients: 100/100 points within 1e-5 of central differences ({elapsed:.2}s)");
}

#[test]
fn surrogates_consistent_at_every_inner_iteration() {
    let scenario = urban_scenario(4, 2, 2, 303);
    let problem = scenario.problem().unwrap();
    let initial = scenario.initial_state().unwrap();
    let users = problem.users.clone();
    let regions = problem.regions_by_user.clone();
    let channel = problem.channel.clone();

    let true_z = |state: &SolutionState| {
        let evals = channel_evals(&state.positions, &users, &regions, &channel).unwrap();
        let gains = uavbs_core::surrogate::gain_matrix(&evals);
        netmodel::objective_z(state, &gains, channel.noise_power)
    };

    let mut positioning_events = 0usize;
    let mut ra_events = 0usize;
    let mut probe_rng = ChaCha8Rng::seed_from_u64(0xfeed);
    let mut inspector = |event: InspectEvent<'_>| match event {
        InspectEvent::Positioning { surrogate, state, z, .. } => {
            positioning_events += 1;
            let zs = surrogate.value(&surrogate.expansion);
            assert!((zs - z).abs() <= 1e-9, "positioning value gap {}", (zs - z).abs());
            // Per-user gradient consistency with the exact rates, central
            // differences over all coordinates.
            let (_, breakdown) = true_z(state);
            let rho = netmodel::penalty(&state.assoc, &state.multipliers);
            let dim = surrogate.expansion.len();
            let h = 1e-3;
            let mut grad = DVector::zeros(dim);
            for (k, piece) in surrogate.pieces.iter().enumerate() {
                let value = piece.value(&surrogate.expansion);
                let exact = breakdown.rate_user[k] + rho;
                assert!(
                    (value - exact).abs() <= 1e-9 * exact.abs().max(1.0),
                    "piece {k}: {value} vs {exact}"
                );
                piece.gradient(&surrogate.expansion, &mut grad);
                for i in 0..dim {
                    let mut plus = state.clone();
                    let mut minus = state.clone();
                    plus.positions[i / 3][i % 3] += h;
                    minus.positions[i / 3][i % 3] -= h;
                    let fd = (true_z(&plus).1.rate_user[k] - true_z(&minus).1.rate_user[k])
                        / (2.0 * h);
                    let scale = fd.abs().max(grad.amax()).max(1e-12);
                    assert!(
                        (fd - grad[i]).abs() / scale <= 1e-5,
                        "piece {k} coord {i}: fd {fd} vs analytic {}",
                        grad[i]
                    );
                }
            }
        }
        InspectEvent::ResourceAllocation { surrogate, state, z, .. } => {
            ra_events += 1;
            let flat = uavbs_core::surrogate::pack_allocation(&state.powers, &state.assoc);
            let zs = surrogate.value(&flat);
            assert!((zs - z).abs() <= 1e-9, "allocation value gap {}", (zs - z).abs());
            // Interference upper bound and penalty lower bound at random
            // feasible probes.
            let (k_count, m_count, n_count) = state.assoc.dim();
            for _ in 0..100 {
                let powers = Array2::from_shape_fn((m_count, n_count), |_| {
                    probe_rng.random_range(0.0..scenario.p_max / n_count as f64)
                });
                let mut assoc = Array3::from_shape_fn((k_count, m_count, n_count), |_| {
                    probe_rng.random_range(0.0..1.0)
                });
                for k in 0..k_count {
                    let total: f64 = assoc.slice(ndarray::s![k, .., ..]).sum();
                    assoc.slice_mut(ndarray::s![k, .., ..]).mapv_inplace(|v| v / total);
                }
                for k in 0..k_count {
                    for m in 0..m_count {
                        for n in 0..n_count {
                            assert!(
                                surrogate.r_bar_ub(k, m, n, &powers)
                                    >= surrogate.r_bar_exact(k, m, n, &powers) - 1e-12
                            );
                        }
                    }
                }
                assert!(
                    surrogate.rho_lb(&assoc)
                        <= netmodel::penalty(&assoc, &state.multipliers) + 1e-12
                );
            }
        }
    };
    let mut dyn_inspector: &mut Inspector<'_> = &mut inspector;
    pdlio::run_with_inspector(&problem, initial, RunOptions::default(), Some(&mut dyn_inspector))
        .unwrap();
    assert!(positioning_events > 0 && ra_events > 0);
    println!(
        "PASS surrogate-consistency: {positioning_events} positioning + {ra_events} allocation expansions all consistent"
    );
}

#[test]
fn objective_monotone_and_loops_terminate() {
    let mut worst_elapsed = 0.0f64;
    for seed in 0..20u64 {
        let scenario = urban_scenario(8, 4, 4, 400 + seed);
        let start = Instant::now();
        let report = scenario.run_scheme(BenchmarkScheme::Proposed).unwrap();
        let elapsed = start.elapsed().as_secs_f64();
        worst_elapsed = worst_elapsed.max(elapsed);
        assert!(elapsed < 300.0, "seed {seed}: run took {elapsed:.1}s");
        assert_eq!(report.status, RunStatus::Converged, "seed {seed} did not converge");
        assert!(report.outer_iterations <= 50, "seed {seed}: {} outers", report.outer_iterations);
        assert!(report.max_violation_before_rounding <= 1e-4, "seed {seed}");
        // Within each outer iteration the penalized objective never drops.
        let mut prev: Option<(usize, f64)> = None;
        let mut inner_count = 0usize;
        for step in &report.trace {
            match prev {
                Some((outer, z)) if outer == step.outer => {
                    inner_count += 1;
                    assert!(
                        step.z >= z - 1e-8,
                        "seed {seed} outer {outer}: z dropped {z} -> {}",
                        step.z
                    );
                }
                _ => inner_count = 1,
            }
            assert!(inner_count <= 40, "seed {seed}: inner loop ran past its cap");
            prev = Some((step.outer, step.z));
        }
    }
    println!(
        "PASS convergence: 20/20 dense-urban runs monotone and terminated (slowest {worst_elapsed:.1}s)"
    );
}

#[test]
fn single_link_matches_closed_form() {
    let config = json!({
        "counts": { "k": 1, "m": 1, "n": 1 },
        "users": [[700.0, 400.0, 0.0]],
        "seed": 7,
    });
    let scenario = Scenario::from_json(&config.to_string()).unwrap();
    let report = scenario.run_scheme(BenchmarkScheme::Proposed).unwrap();
    let params = ChannelParams::defaults();
    let expected = (1.0
        + scenario.p_max * params.beta_los * scenario.h_min.powf(-params.alpha_los)
            / params.noise_power)
        .log2();
    assert!(
        (report.min_rate - expected).abs() <= 1e-3,
        "min rate {} vs closed form {expected}",
        report.min_rate
    );
    let overhead = Vector3::new(700.0, 400.0, scenario.h_min);
    let offset = (report.state.positions[0] - overhead).norm();
    assert!(offset <= 0.5, "UAV ended {offset:.3} m from overhead optimum");
    println!(
        "PASS single-link: rate within {:.1e} of closed form, UAV {offset:.3} m from overhead",
        (report.min_rate - expected).abs()
    );
}

#[test]
fn proposed_scheme_dominates_benchmarks() {
    let template = urban_scenario(8, 4, 4, 600);
    let rows = monte_carlo(&template, 20, &BenchmarkScheme::ALL);
    let find = |tag: &str| rows.iter().find(|r| r.scheme == tag).unwrap();
    let proposed = find("proposed");
    assert!(proposed.runs_ok >= 15, "only {} proposed runs succeeded", proposed.runs_ok);
    for tag in ["fixed-association", "kmeans-position", "no-geoinfo"] {
        let bench = find(tag);
        let gap = proposed.mean_min_rate - bench.mean_min_rate;
        let spread = proposed.std_error + bench.std_error;
        assert!(gap >= -spread, "{tag}: gap {gap:.4} below -1 std error ({spread:.4})");
    }
    let blind = find("no-geoinfo");
    for tag in ["proposed", "fixed-association", "kmeans-position"] {
        assert!(
            blind.mean_min_rate < find(tag).mean_min_rate,
            "no-geoinfo should be strictly worst (vs {tag})"
        );
    }
    println!(
        "PASS benchmark-ordering: proposed {:.3} >= fixed {:.3}, kmeans {:.3}, blind {:.3} (strictly worst)",
        proposed.mean_min_rate,
        find("fixed-association").mean_min_rate,
        find("kmeans-position").mean_min_rate,
        blind.mean_min_rate
    );
}

#[test]
fn proposed_matches_fixed_association_at_full_load() {
    let template = urban_scenario(4, 4, 4, 700);
    let schemes = [BenchmarkScheme::Proposed, BenchmarkScheme::FixedAssociation];
    let rows = monte_carlo(&template, 20, &schemes);
    let proposed = rows[0].mean_min_rate;
    let fixed = rows[1].mean_min_rate;
    let gap = (proposed - fixed).abs() / proposed.abs().max(fixed.abs());
    assert!(gap <= 0.05, "means {proposed:.4} vs {fixed:.4} differ by {:.1}%", gap * 100.0);
    println!(
        "PASS full-load-parity: proposed {proposed:.3} vs fixed-association {fixed:.3} ({:.2}% apart)",
        gap * 100.0
    );
}

#[test]
fn rounding_keeps_feasibility_and_objective() {
    let scenario = urban_scenario(8, 4, 4, 800);
    let report = scenario.run_scheme(BenchmarkScheme::Proposed).unwrap();
    let assoc = &report.state.assoc;
    let (k_count, m_count, n_count) = assoc.dim();
    for &c in assoc.iter() {
        assert!(c == 0.0 || c == 1.0, "non-binary entry {c}");
    }
    for k in 0..k_count {
        let total: f64 = assoc.slice(ndarray::s![k, .., ..]).sum();
        assert_eq!(total, 1.0, "user {k} serves {total} links");
    }
    for m in 0..m_count {
        for n in 0..n_count {
            let load: f64 = assoc.slice(ndarray::s![.., m, n]).sum();
            assert!(load <= 1.0, "subcarrier ({m},{n}) oversubscribed: {load}");
        }
    }
    let change = (report.z_after_rounding - report.z_before_rounding).abs()
        / report.z_before_rounding.abs().max(1e-12);
    assert!(change < 0.01, "rounding moved the objective by {:.2}%", change * 100.0);
    println!(
        "PASS rounding: association binary and exclusive, objective moved {:.3}%",
        change * 100.0
    );
}

/// Multiresolution grid search; independent of the interior-point path.
fn grid_search(problem: &MaximinProblem, rounds: usize) -> f64 {
    let dim = problem.dim;
    let steps = 16usize;
    let mut lo = problem.lower.clone();
    let mut hi = problem.upper.clone();
    let mut best = f64::NEG_INFINITY;
    let mut best_x = problem.start.clone();
    for _ in 0..rounds {
        let mut index = vec![0usize; dim];
        let mut x = vec![0.0; dim];
        'grid: loop {
            for i in 0..dim {
                x[i] = lo[i] + (hi[i] - lo[i]) * index[i] as f64 / steps as f64;
            }
            if problem.violation(&x) <= 1e-12 {
                let v = problem.objective(&x);
                if v > best {
                    best = v;
                    best_x = x.clone();
                }
            }
            for i in 0..dim {
                index[i] += 1;
                if index[i] <= steps {
                    continue 'grid;
                }
                index[i] = 0;
            }
            break;
        }
        for i in 0..dim {
            let half = 0.35 * (hi[i] - lo[i]);
            lo[i] = (best_x[i] - half).max(problem.lower[i]);
            hi[i] = (best_x[i] + half).min(problem.upper[i]);
        }
    }
    // Nelder-Mead polish from the grid incumbent: the objective is concave,
    // so any local refinement is global; this resolves kinked ridges the
    // axis-aligned grid tracks poorly.
    best.max(nelder_mead(problem, &best_x, 0.05, 2000))
}

/// Simplex ascent of the clamped-to-box maximin objective.
fn nelder_mead(problem: &MaximinProblem, start: &[f64], scale: f64, iters: usize) -> f64 {
    let dim = problem.dim;
    let clamp_eval = |x: &[f64]| {
        let clamped: Vec<f64> = (0..dim)
            .map(|i| x[i].clamp(problem.lower[i], problem.upper[i]))
            .collect();
        problem.objective(&clamped)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = (0..=dim)
        .map(|v| {
            let mut x = start.to_vec();
            if v > 0 {
                x[v - 1] += scale;
            }
            let f = clamp_eval(&x);
            (x, f)
        })
        .collect();
    for _ in 0..iters {
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1)); // best first (maximizing)
        let centroid: Vec<f64> = (0..dim)
            .map(|i| simplex[..dim].iter().map(|(x, _)| x[i]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].clone();
        let reflect: Vec<f64> =
            (0..dim).map(|i| centroid[i] + (centroid[i] - worst.0[i])).collect();
        let fr = clamp_eval(&reflect);
        if fr > simplex[0].1 {
            let expand: Vec<f64> =
                (0..dim).map(|i| centroid[i] + 2.0 * (centroid[i] - worst.0[i])).collect();
            let fe = clamp_eval(&expand);
            simplex[dim] = if fe > fr { (expand, fe) } else { (reflect, fr) };
        } else if fr > simplex[dim - 1].1 {
            simplex[dim] = (reflect, fr);
        } else {
            let contract: Vec<f64> =
                (0..dim).map(|i| centroid[i] - 0.5 * (centroid[i] - worst.0[i])).collect();
            let fc = clamp_eval(&contract);
            if fc > worst.1 {
                simplex[dim] = (contract, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    for i in 0..dim {
                        entry.0[i] = best[i] + 0.5 * (entry.0[i] - best[i]);
                    }
                    entry.1 = clamp_eval(&entry.0);
                }
            }
        }
    }
    simplex.iter().map(|(_, f)| *f).fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn maximin_solver_matches_grid_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(901);
    for case in 0..50 {
        let dim = rng.random_range(1..=4);
        let pieces = (0..5)
            .map(|_| Piece::Quad {
                quad: (0..dim).map(|_| -rng.random_range(0.05..1.0)).collect(),
                lin: (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                constant: rng.random_range(-0.5..0.5),
            })
            .collect();
        let problem = MaximinProblem {
            dim,
            pieces,
            extra: None,
            lin_ineq: Vec::new(),
            lin_eq: Vec::new(),
            lower: vec![-2.0; dim],
            upper: vec![2.0; dim],
            start: vec![0.0; dim],
            interior_hint: None,
        };
        let report =
            solve_maximin(&problem, DEFAULT_TOL_KKT, DEFAULT_TOL_FEAS, DEFAULT_MAX_ITER).unwrap();
        let oracle = grid_search(&problem, 60);
        assert!(
            (report.value - oracle).abs() <= 1e-5,
            "case {case}: solver {} vs grid {oracle}",
            report.value
        );
    }
    println!("PASS maximin-solver: 50/50 instances within 1e-5 of grid search");
}

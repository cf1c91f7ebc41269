//! Scenario definition and experiment harness: JSON loading with defaults,
//! validation, initial-state construction, the benchmark schemes, and the
//! Monte-Carlo driver.

use crate::channel::ChannelParams;
use crate::geometry::{self, BlockedRegion, Building, GeometryError};
use crate::netmodel::SolutionState;
use crate::pdlio::{self, AlgoParams, PdlioError, Problem, RunOptions, RunReport};
use nalgebra::Vector3;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
    #[error("either `users` or `user_count` must be provided, not both or neither")]
    UserSpec,
    #[error("could not place user {0} outside all footprints after 10000 attempts")]
    OverBuilt(usize),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Channel(#[from] crate::channel::ChannelError),
    #[error(transparent)]
    Run(#[from] PdlioError),
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

// ---- JSON schema (raw config with dB fields and defaults) ----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AreaConfig {
    x_d: f64,
    y_d: f64,
}

impl Default for AreaConfig {
    fn default() -> Self {
        Self { x_d: 1500.0, y_d: 1500.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BuildingConfig {
    min: [f64; 3],
    size: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CountsConfig {
    k: usize,
    m: usize,
    n: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct ChannelConfig {
    alpha_los: f64,
    alpha_nlos: f64,
    beta_los_db: f64,
    beta_nlos_db: f64,
    eta: f64,
    noise_dbm: f64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            alpha_los: 2.0,
            alpha_nlos: 3.3,
            beta_los_db: -46.43,
            beta_nlos_db: -56.43,
            eta: 1000.0,
            noise_dbm: -107.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct PowerConfig {
    p_max_dbm: f64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self { p_max_dbm: 30.0 }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
struct AlgoConfig {
    zeta: Option<f64>,
    tau: Option<f64>,
    eps_inner: Option<f64>,
    eps_outer: Option<f64>,
    /// Defaults to 0.2 K / (M N) when omitted.
    lambda0: Option<f64>,
    mu0: Option<f64>,
    max_inner: Option<usize>,
    max_outer: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ScenarioConfig {
    #[serde(default)]
    area: AreaConfig,
    #[serde(default = "default_h_min")]
    h_min: f64,
    #[serde(default)]
    buildings: Vec<BuildingConfig>,
    #[serde(default)]
    users: Option<Vec<[f64; 3]>>,
    #[serde(default)]
    user_count: Option<usize>,
    counts: CountsConfig,
    #[serde(default)]
    channel: ChannelConfig,
    #[serde(default)]
    power: PowerConfig,
    #[serde(default = "default_d_min")]
    d_min: f64,
    #[serde(default)]
    algo: AlgoConfig,
    #[serde(default)]
    seed: u64,
}

fn default_h_min() -> f64 {
    100.0
}

fn default_d_min() -> f64 {
    25.0
}

// ---- Resolved scenario (linear units) ----

#[derive(Debug, Clone)]
pub struct Scenario {
    pub area: (f64, f64),
    pub h_min: f64,
    pub buildings: Vec<Building>,
    pub users: Vec<Vector3<f64>>,
    pub num_users: usize,
    pub num_uavs: usize,
    pub num_subcarriers: usize,
    pub channel: ChannelParams,
    pub p_max: f64,
    pub d_min: f64,
    pub algo: AlgoParams,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkScheme {
    Proposed,
    FixedAssociation,
    KmeansPosition,
    NoGeoinfo,
}

impl BenchmarkScheme {
    pub const ALL: [BenchmarkScheme; 4] = [
        BenchmarkScheme::Proposed,
        BenchmarkScheme::FixedAssociation,
        BenchmarkScheme::KmeansPosition,
        BenchmarkScheme::NoGeoinfo,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            BenchmarkScheme::Proposed => "proposed",
            BenchmarkScheme::FixedAssociation => "fixed-association",
            BenchmarkScheme::KmeansPosition => "kmeans-position",
            BenchmarkScheme::NoGeoinfo => "no-geoinfo",
        }
    }
}

impl std::str::FromStr for BenchmarkScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        BenchmarkScheme::ALL
            .into_iter()
            .find(|scheme| scheme.tag() == s)
            .ok_or_else(|| format!("unknown scheme `{s}`"))
    }
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, ScenarioError> {
        let config: ScenarioConfig = serde_json::from_str(text)?;
        Scenario::from_config(config)
    }

    fn from_config(config: ScenarioConfig) -> Result<Self, ScenarioError> {
        let buildings = config
            .buildings
            .iter()
            .map(|b| Building::new(Vector3::from(b.min), Vector3::from(b.size)))
            .collect::<Vec<_>>();
        let area = (config.area.x_d, config.area.y_d);

        let users = match (&config.users, config.user_count) {
            (Some(list), None) => list.iter().map(|&u| Vector3::from(u)).collect(),
            (None, Some(count)) => {
                sample_users(count, area, &buildings, config.seed).ok_or_else(|| {
                    ScenarioError::OverBuilt(0)
                })?
            }
            _ => return Err(ScenarioError::UserSpec),
        };

        let counts = config.counts.clone();
        let defaults = AlgoParams::defaults();
        let a = &config.algo;
        let algo = AlgoParams {
            zeta: a.zeta.unwrap_or(defaults.zeta),
            tau: a.tau.unwrap_or(defaults.tau),
            eps_inner: a.eps_inner.unwrap_or(defaults.eps_inner),
            eps_outer: a.eps_outer.unwrap_or(defaults.eps_outer),
            lambda0: a
                .lambda0
                .unwrap_or(0.2 * counts.k as f64 / (counts.m as f64 * counts.n as f64)),
            mu0: a.mu0.unwrap_or(defaults.mu0),
            gamma_floor: defaults.gamma_floor,
            max_inner: a.max_inner.unwrap_or(defaults.max_inner),
            max_outer: a.max_outer.unwrap_or(defaults.max_outer),
        };
        let channel = ChannelParams {
            alpha_los: config.channel.alpha_los,
            alpha_nlos: config.channel.alpha_nlos,
            beta_los: db_to_linear(config.channel.beta_los_db),
            beta_nlos: db_to_linear(config.channel.beta_nlos_db),
            eta: config.channel.eta,
            noise_power: dbm_to_watts(config.channel.noise_dbm),
        };

        Ok(Scenario {
            area,
            h_min: config.h_min,
            buildings,
            users,
            num_users: counts.k,
            num_uavs: counts.m,
            num_subcarriers: counts.n,
            channel,
            p_max: dbm_to_watts(config.power.p_max_dbm),
            d_min: config.d_min,
            algo,
            seed: config.seed,
        })
    }

    /// Same scene and parameters with freshly sampled user positions.
    pub fn with_random_users(&self, seed: u64) -> Result<Scenario, ScenarioError> {
        let users = sample_users(self.num_users, self.area, &self.buildings, seed)
            .ok_or(ScenarioError::OverBuilt(0))?;
        Ok(Scenario { users, seed, ..self.clone() })
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut violations = Vec::new();
        if self.users.len() != self.num_users {
            violations.push(format!(
                "user list has {} entries but counts.k = {}",
                self.users.len(),
                self.num_users
            ));
        }
        if self.num_users > self.num_uavs * self.num_subcarriers {
            violations.push(format!(
                "{} users cannot each hold an exclusive (UAV, subcarrier) pair out of {}x{}",
                self.num_users, self.num_uavs, self.num_subcarriers
            ));
        }
        for (k, u) in self.users.iter().enumerate() {
            if u.z != 0.0 {
                violations.push(format!("user {k} is not on the ground (z = {})", u.z));
            }
            if u.x < 0.0 || u.x > self.area.0 || u.y < 0.0 || u.y > self.area.1 {
                violations.push(format!("user {k} lies outside the area"));
            }
            for (q, b) in self.buildings.iter().enumerate() {
                if b.footprint_contains(u) {
                    violations.push(format!("user {k} lies in the footprint of building {q}"));
                }
            }
        }
        let max_height = self.buildings.iter().map(Building::height).fold(0.0, f64::max);
        if self.h_min <= max_height {
            violations.push(format!(
                "minimum altitude {} must exceed the tallest building ({max_height})",
                self.h_min
            ));
        }
        if self.h_min < 1.0 {
            violations.push("minimum altitude must be at least 1 m".into());
        }
        if self.d_min <= 0.0 {
            violations.push("separation distance must be positive".into());
        }
        if self.num_uavs == 0 || self.num_subcarriers == 0 || self.num_users == 0 {
            violations.push("counts must all be positive".into());
        }
        if let Err(e) = self.channel.validate() {
            violations.push(e);
        }
        if violations.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(violations))
        }
    }

    pub fn blocked_regions(&self) -> Result<Vec<Vec<BlockedRegion>>, GeometryError> {
        self.users
            .iter()
            .enumerate()
            .map(|(k, u)| geometry::regions_for_user(u, k, &self.buildings))
            .collect()
    }

    pub fn problem(&self) -> Result<Problem, ScenarioError> {
        Ok(Problem {
            users: self.users.clone(),
            regions_by_user: self.blocked_regions()?,
            channel: self.channel,
            p_max: self.p_max,
            d_min: self.d_min,
            area: self.area,
            h_min: self.h_min,
            algo: self.algo.clone(),
        })
    }

    /// Start of the algorithm: UAVs 500 m above the users nearest the area
    /// corners, greedy gain-based association, even power split, uniform
    /// multipliers.
    pub fn initial_state(&self) -> Result<SolutionState, ScenarioError> {
        self.initial_state_at(None)
    }

    fn initial_state_at(
        &self,
        positions_override: Option<Vec<Vector3<f64>>>,
    ) -> Result<SolutionState, ScenarioError> {
        let (kc, mc, nc) = (self.num_users, self.num_uavs, self.num_subcarriers);
        let positions = match positions_override {
            Some(p) => stagger_altitudes(p, self.d_min),
            None => {
                let corners = [
                    Vector3::new(0.0, 0.0, 0.0),
                    Vector3::new(self.area.0, 0.0, 0.0),
                    Vector3::new(self.area.0, self.area.1, 0.0),
                    Vector3::new(0.0, self.area.1, 0.0),
                ];
                let mut chosen = vec![false; kc];
                let mut seeds = Vec::with_capacity(mc);
                for m in 0..mc {
                    let corner = corners[m % 4];
                    let pick = (0..kc)
                        .filter(|&k| !chosen[k])
                        .min_by(|&a, &b| {
                            (self.users[a] - corner)
                                .norm()
                                .total_cmp(&(self.users[b] - corner).norm())
                        })
                        .expect("more UAVs than users is prevented by validation");
                    chosen[pick] = true;
                    seeds.push(pick);
                }
                let altitude = 500f64.max(self.h_min);
                stagger_altitudes(
                    seeds
                        .iter()
                        .map(|&k| Vector3::new(self.users[k].x, self.users[k].y, altitude))
                        .collect(),
                    self.d_min,
                )
            }
        };

        // Greedy association in user order: best-gain UAV with an idle
        // subcarrier; within it, the globally least-used idle subcarrier.
        let regions = self.blocked_regions()?;
        let mut gains = Array2::zeros((kc, mc));
        for k in 0..kc {
            for m in 0..mc {
                let eval = crate::channel::gain(
                    &positions[m],
                    &self.users[k],
                    &regions[k],
                    &self.channel,
                )
                .map_err(|e| PdlioError::from(e))?;
                gains[[k, m]] = eval.gain;
            }
        }
        let mut occupied = vec![vec![false; nc]; mc];
        let mut usage = vec![0usize; nc];
        let mut assoc = Array3::zeros((kc, mc, nc));
        for k in 0..kc {
            let m = (0..mc)
                .filter(|&m| occupied[m].iter().any(|&o| !o))
                .max_by(|&a, &b| gains[[k, a]].total_cmp(&gains[[k, b]]).then(b.cmp(&a)))
                .expect("K <= M*N guarantees an idle slot");
            let n = (0..nc)
                .filter(|&n| !occupied[m][n])
                .min_by_key(|&n| (usage[n], n))
                .unwrap();
            occupied[m][n] = true;
            usage[n] += 1;
            assoc[[k, m, n]] = 1.0;
        }

        let mut powers = Array2::zeros((mc, nc));
        for m in 0..mc {
            let count = occupied[m].iter().filter(|&&o| o).count();
            if count > 0 {
                for n in 0..nc {
                    if occupied[m][n] {
                        powers[[m, n]] = self.p_max / count as f64;
                    }
                }
            }
        }

        Ok(SolutionState {
            positions,
            powers,
            assoc,
            multipliers: Array3::from_elem((kc, mc, nc), self.algo.lambda0),
        })
    }

    pub fn run_scheme(&self, scheme: BenchmarkScheme) -> Result<RunReport, ScenarioError> {
        match scheme {
            BenchmarkScheme::Proposed => {
                let report =
                    pdlio::run(&self.problem()?, self.initial_state()?, RunOptions::default())?;
                Ok(report)
            }
            BenchmarkScheme::FixedAssociation => {
                let options =
                    RunOptions { optimize_positions: true, freeze_assoc: true, outer_loop: false };
                Ok(pdlio::run(&self.problem()?, self.initial_state()?, options)?)
            }
            BenchmarkScheme::KmeansPosition => {
                let centers = kmeans_positions(&self.users, self.num_uavs, self.seed)
                    .into_iter()
                    .map(|c| Vector3::new(c.x, c.y, 500f64.max(self.h_min)))
                    .collect();
                let state = self.initial_state_at(Some(centers))?;
                let options =
                    RunOptions { optimize_positions: false, freeze_assoc: false, outer_loop: true };
                Ok(pdlio::run(&self.problem()?, state, options)?)
            }
            BenchmarkScheme::NoGeoinfo => {
                // Optimize as if every link were line-of-sight, then score
                // the result against the true blockage-aware channel.
                let mut blind = self.problem()?;
                blind.regions_by_user = vec![Vec::new(); self.num_users];
                let mut report = pdlio::run(&blind, self.initial_state()?, RunOptions::default())?;
                let truth = self.problem()?;
                let (z, breakdown) = pdlio::evaluate(&truth, &report.state)?;
                let (_, initial_bd) = pdlio::evaluate(&truth, &self.initial_state()?)?;
                report.min_rate = breakdown.min_rate;
                report.rate_user = breakdown.rate_user;
                report.z_after_rounding = z;
                report.initial_min_rate = initial_bd.min_rate;
                Ok(report)
            }
        }
    }
}

fn sample_users(
    count: usize,
    area: (f64, f64),
    buildings: &[Building],
    seed: u64,
) -> Option<Vec<Vector3<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut users = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = false;
        for _ in 0..10_000 {
            let candidate = Vector3::new(
                rng.random_range(0.0..area.0),
                rng.random_range(0.0..area.1),
                0.0,
            );
            if buildings.iter().all(|b| !b.footprint_contains(&candidate)) {
                users.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(users)
}

/// Raise later UAVs in d_min increments until all pairwise distances clear
/// the separation floor; horizontal placement is preserved.
fn stagger_altitudes(mut positions: Vec<Vector3<f64>>, d_min: f64) -> Vec<Vector3<f64>> {
    for m in 1..positions.len() {
        loop {
            let conflict = (0..m).any(|j| (positions[m] - positions[j]).norm() < d_min);
            if !conflict {
                break;
            }
            positions[m].z += d_min;
        }
    }
    positions
}

/// Lloyd's clustering with farthest-point initialization; cluster centers in
/// the horizontal plane.
pub fn kmeans_positions(users: &[Vector3<f64>], m_count: usize, seed: u64) -> Vec<Vector3<f64>> {
    assert!(users.len() >= m_count && m_count > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vector3<f64>> = Vec::with_capacity(m_count);
    centroids.push(users[rng.random_range(0..users.len())]);
    while centroids.len() < m_count {
        let farthest = users
            .iter()
            .max_by(|a, b| {
                let da = centroids.iter().map(|c| (*a - c).norm()).fold(f64::INFINITY, f64::min);
                let db = centroids.iter().map(|c| (*b - c).norm()).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .unwrap();
        centroids.push(*farthest);
    }

    let mut assignment = vec![usize::MAX; users.len()];
    loop {
        let mut changed = false;
        for (i, u) in users.iter().enumerate() {
            let best = (0..m_count)
                .min_by(|&a, &b| (u - centroids[a]).norm().total_cmp(&(u - centroids[b]).norm()))
                .unwrap();
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        for c in 0..m_count {
            let members: Vec<&Vector3<f64>> =
                users.iter().zip(&assignment).filter(|(_, &a)| a == c).map(|(u, _)| u).collect();
            if members.is_empty() {
                // Re-seed an empty cluster at the point farthest from its
                // (stale) centroid.
                centroids[c] = *users
                    .iter()
                    .max_by(|a, b| {
                        (*a - centroids[c]).norm().total_cmp(&(*b - centroids[c]).norm())
                    })
                    .unwrap();
                changed = true;
            } else {
                let sum: Vector3<f64> = members.iter().map(|&&u| u).sum();
                centroids[c] = sum / members.len() as f64;
            }
        }
        if !changed {
            break;
        }
    }
    centroids
}

#[derive(Debug, Clone, Serialize)]
pub struct McRow {
    pub scheme: &'static str,
    pub mean_min_rate: f64,
    pub std_error: f64,
    pub runs_ok: usize,
    pub runs_failed: usize,
}

/// Independent user realizations per scheme; failures are counted and
/// excluded from the means.
pub fn monte_carlo(
    template: &Scenario,
    realizations: usize,
    schemes: &[BenchmarkScheme],
) -> Vec<McRow> {
    let per_run: Vec<Vec<Option<f64>>> = (0..realizations)
        .into_par_iter()
        .map(|r| {
            let seed = template.seed.wrapping_add(1).wrapping_mul(0x9e3779b9).wrapping_add(r as u64);
            let Ok(scenario) = template.with_random_users(seed) else {
                return vec![None; schemes.len()];
            };
            schemes
                .iter()
                .map(|&scheme| scenario.run_scheme(scheme).ok().map(|rep| rep.min_rate))
                .collect()
        })
        .collect();

    schemes
        .iter()
        .enumerate()
        .map(|(i, &scheme)| {
            let values: Vec<f64> = per_run.iter().filter_map(|row| row[i]).collect();
            let ok = values.len();
            let mean = if ok > 0 { values.iter().sum::<f64>() / ok as f64 } else { f64::NAN };
            let std_error = if ok > 1 {
                let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (ok - 1) as f64;
                (var / ok as f64).sqrt()
            } else {
                0.0
            };
            McRow {
                scheme: scheme.tag(),
                mean_min_rate: mean,
                std_error,
                runs_ok: ok,
                runs_failed: realizations - ok,
            }
        })
        .collect()
}

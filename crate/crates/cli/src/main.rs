//! `uavbs`: command-line front end — run single scenarios, sweep over the
//! user/UAV/subcarrier axes, and validate scenario files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::Vector3;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use uavbs_core::geometry::{los_oracle, min_clearance};
use uavbs_core::pdlio::RunStatus;
use uavbs_core::scenario::{monte_carlo, BenchmarkScheme, Scenario};

const FORMAT_VERSION: u32 = 1;
const EXIT_INVALID: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "uavbs", about = "Multi-UAV base-station placement and resource allocation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one scenario and write result.json (and optionally a trace).
    Run(RunArgs),
    /// Monte-Carlo sweep over an experiment axis; writes sweep.csv.
    Sweep(SweepArgs),
    /// Check a scenario file and the geometry it induces.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Scenario JSON file.
    scenario: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Override the outer-iteration cap.
    #[arg(long)]
    max_outer: Option<usize>,
    /// Override the inner-iteration cap.
    #[arg(long)]
    max_inner: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Solution scheme to run.
    #[arg(long, default_value = "proposed", value_parser = parse_scheme)]
    scheme: BenchmarkScheme,
    /// Also write trace.ndjson (one line per inner iteration).
    #[arg(long)]
    trace: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Users,
    Uavs,
    Subcarriers,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Swept quantity.
    #[arg(long, value_enum)]
    axis: Axis,
    /// Axis values, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    /// Independent user realizations per axis value.
    #[arg(long, default_value_t = 1)]
    realizations: usize,
    /// Schemes to compare, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_scheme,
          default_value = "proposed,fixed-association,kmeans-position,no-geoinfo")]
    schemes: Vec<BenchmarkScheme>,
    /// Worker threads for parallel realizations (0 = all cores).
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Args)]
struct ValidateArgs {
    /// Scenario JSON file.
    scenario: PathBuf,
}

fn parse_scheme(s: &str) -> Result<BenchmarkScheme, String> {
    BenchmarkScheme::from_str(s)
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Validate(args) => cmd_validate(args),
    }
}

/// Load, apply overrides, and validate; failures print to stderr.
fn load_scenario(common: &CommonArgs) -> Result<Scenario, String> {
    let text = fs::read_to_string(&common.scenario)
        .map_err(|e| format!("cannot read {}: {e}", common.scenario.display()))?;
    let mut scenario = Scenario::from_json(&text).map_err(|e| e.to_string())?;
    if let Some(seed) = common.seed {
        scenario = scenario.with_random_users(seed).map_err(|e| e.to_string())?;
    }
    if let Some(cap) = common.max_outer {
        scenario.algo.max_outer = cap;
    }
    if let Some(cap) = common.max_inner {
        scenario.algo.max_inner = cap;
    }
    scenario.validate().map_err(|e| e.to_string())?;
    Ok(scenario)
}

fn cmd_run(args: RunArgs) -> ExitCode {
    let scenario = match load_scenario(&args.common) {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("invalid scenario: {msg}");
            return ExitCode::from(EXIT_INVALID);
        }
    };
    let report = match scenario.run_scheme(args.scheme) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("run failed: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
    };

    if let Err(e) = fs::create_dir_all(&args.common.out) {
        eprintln!("cannot create {}: {e}", args.common.out.display());
        return ExitCode::from(EXIT_INVALID);
    }
    let assignment: Vec<[usize; 2]> = (0..scenario.num_users)
        .map(|k| {
            let mut slot = [0usize; 2];
            for m in 0..scenario.num_uavs {
                for n in 0..scenario.num_subcarriers {
                    if report.state.assoc[[k, m, n]] > 0.5 {
                        slot = [m, n];
                    }
                }
            }
            slot
        })
        .collect();
    let result = json!({
        "format_version": FORMAT_VERSION,
        "scheme": args.scheme.tag(),
        "status": report.status,
        "min_rate": report.min_rate,
        "rate_user": report.rate_user,
        "initial_min_rate": report.initial_min_rate,
        "z_before_rounding": report.z_before_rounding,
        "z_after_rounding": report.z_after_rounding,
        "max_violation_before_rounding": report.max_violation_before_rounding,
        "outer_iterations": report.outer_iterations,
        "inner_iterations_total": report.inner_iterations_total,
        "positions": report.state.positions.iter().map(|p| [p.x, p.y, p.z]).collect::<Vec<_>>(),
        "powers": report.state.powers.outer_iter().map(|row| row.to_vec()).collect::<Vec<_>>(),
        "assignment": assignment,
    });
    if let Err(e) = write_text(&args.common.out.join("result.json"), &format!("{result:#}\n")) {
        eprintln!("{e}");
        return ExitCode::from(EXIT_INVALID);
    }
    if args.trace {
        let mut lines = String::new();
        for step in &report.trace {
            lines.push_str(&serde_json::to_string(step).expect("trace serializes"));
            lines.push('\n');
        }
        if let Err(e) = write_text(&args.common.out.join("trace.ndjson"), &lines) {
            eprintln!("{e}");
            return ExitCode::from(EXIT_INVALID);
        }
    }

    println!("{}", report.min_rate);
    if report.status == RunStatus::NotConverged {
        eprintln!("warning: outer loop did not converge; result written anyway");
        return ExitCode::from(EXIT_NOT_CONVERGED);
    }
    ExitCode::SUCCESS
}

fn cmd_sweep(args: SweepArgs) -> ExitCode {
    if args.values.is_empty() || args.values.iter().any(|&v| v == 0) || args.realizations == 0 {
        eprintln!("invalid sweep: values must be positive and realizations >= 1");
        return ExitCode::from(EXIT_INVALID);
    }
    if args.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(args.jobs)
            .build_global()
            .expect("thread pool configured once");
    }
    let text = match fs::read_to_string(&args.common.scenario) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.common.scenario.display());
            return ExitCode::from(EXIT_INVALID);
        }
    };
    let base: serde_json::Value = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("invalid scenario: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
    };

    let mut csv = String::from("# format_version 1\n");
    csv.push_str("axis_value,scheme,mean_min_rate,stderr,runs_ok,runs_failed\n");
    for &value in &args.values {
        // Users are resampled per realization, so the axis only adjusts the
        // population counts of the template.
        let mut config = base.clone();
        let key = match args.axis {
            Axis::Users => "k",
            Axis::Uavs => "m",
            Axis::Subcarriers => "n",
        };
        config["counts"][key] = json!(value);
        if matches!(args.axis, Axis::Users) {
            config.as_object_mut().unwrap().remove("users");
            config["user_count"] = json!(value);
        }
        if let Some(seed) = args.common.seed {
            config["seed"] = json!(seed);
        }
        let mut template = match Scenario::from_json(&config.to_string()) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("axis value {value}: invalid scenario: {e}");
                return ExitCode::from(EXIT_INVALID);
            }
        };
        if let Some(cap) = args.common.max_outer {
            template.algo.max_outer = cap;
        }
        if let Some(cap) = args.common.max_inner {
            template.algo.max_inner = cap;
        }
        if let Err(e) = template.validate() {
            eprintln!("axis value {value}: invalid scenario: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
        for row in monte_carlo(&template, args.realizations, &args.schemes) {
            csv.push_str(&format!(
                "{value},{},{},{},{},{}\n",
                row.scheme, row.mean_min_rate, row.std_error, row.runs_ok, row.runs_failed
            ));
        }
    }

    if let Err(e) = fs::create_dir_all(&args.common.out) {
        eprintln!("cannot create {}: {e}", args.common.out.display());
        return ExitCode::from(EXIT_INVALID);
    }
    if let Err(e) = write_text(&args.common.out.join("sweep.csv"), &csv) {
        eprintln!("{e}");
        return ExitCode::from(EXIT_INVALID);
    }
    print!("{csv}");
    ExitCode::SUCCESS
}

fn cmd_validate(args: ValidateArgs) -> ExitCode {
    let text = match fs::read_to_string(&args.scenario) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", args.scenario.display());
            return ExitCode::from(EXIT_INVALID);
        }
    };
    let scenario = match Scenario::from_json(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("invalid scenario: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
    };
    if let Err(e) = scenario.validate() {
        eprintln!("invalid scenario: {e}");
        return ExitCode::from(EXIT_INVALID);
    }

    // Geometry self-checks: unit halfspace normals and agreement between the
    // polyhedral classifier and the direct segment test on sampled probes.
    let regions_by_user = match scenario.blocked_regions() {
        Ok(r) => r,
        Err(e) => {
            eprintln!("geometry construction failed: {e}");
            return ExitCode::from(EXIT_INVALID);
        }
    };
    let mut violations = Vec::new();
    for (k, regions) in regions_by_user.iter().enumerate() {
        for (q, region) in regions.iter().enumerate() {
            for hs in &region.halfspaces {
                if (hs.normal.norm() - 1.0).abs() > 1e-9 {
                    violations.push(format!(
                        "user {k} region {q}: non-unit halfspace normal (norm {})",
                        hs.normal.norm()
                    ));
                }
            }
        }
    }
    let tallest =
        scenario.buildings.iter().map(|b| b.height()).fold(0.0f64, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0x5eed);
    let mut checked = 0;
    while checked < 200 && !scenario.users.is_empty() {
        let k = rng.random_range(0..scenario.users.len());
        let user = scenario.users[k];
        let probe = Vector3::new(
            rng.random_range(0.0..scenario.area.0),
            rng.random_range(0.0..scenario.area.1),
            rng.random_range(tallest.max(scenario.h_min)..tallest.max(scenario.h_min) + 500.0),
        );
        let los_polyhedral = match min_clearance(&regions_by_user[k], &probe) {
            Some(c) => {
                if c.value.abs() / (probe - user).norm() < 1e-9 {
                    continue; // ambiguous boundary sample
                }
                c.value > 0.0
            }
            None => true,
        };
        if los_polyhedral != los_oracle(&user, &probe, &scenario.buildings) {
            violations.push(format!(
                "user {k}: classifier mismatch at probe ({:.1}, {:.1}, {:.1})",
                probe.x, probe.y, probe.z
            ));
        }
        checked += 1;
    }

    if violations.is_empty() {
        println!(
            "ok: {} users, {} UAVs, {} subcarriers, {} buildings; geometry self-checks passed",
            scenario.num_users,
            scenario.num_uavs,
            scenario.num_subcarriers,
            scenario.buildings.len()
        );
        ExitCode::SUCCESS
    } else {
        for v in &violations {
            eprintln!("violation: {v}");
        }
        ExitCode::from(EXIT_INVALID)
    }
}

fn write_text(path: &Path, content: &str) -> Result<(), String> {
    let mut file =
        fs::File::create(path).map_err(|e| format!("cannot write {}: {e}", path.display()))?;
    file.write_all(content.as_bytes())
        .map_err(|e| format!("cannot write {}: {e}", path.display()))
}

//! End-to-end checks of the `uavbs` binary: exit codes, artifact files, and
//! reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn uavbs(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uavbs"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

/// Two users, one UAV, two subcarriers, one building: converges in seconds.
fn small_scenario() -> serde_json::Value {
    serde_json::json!({
        "counts": { "k": 2, "m": 1, "n": 2 },
        "buildings": [
            { "min": [400.0, 400.0, 0.0], "size": [60.0, 60.0, 80.0] }
        ],
        "users": [[200.0, 300.0, 0.0], [900.0, 700.0, 0.0]],
        "seed": 5,
    })
}

fn write_scenario(dir: &Path, value: &serde_json::Value) -> String {
    let path = dir.join("scenario.json");
    fs::write(&path, value.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_writes_result_and_prints_min_rate() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), &small_scenario());
    let out = uavbs(&["run", &path, "--out", "artifacts"], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let printed: f64 = String::from_utf8_lossy(&out.stdout).trim().parse().unwrap();
    assert!(printed > 0.0);
    let result: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("artifacts/result.json")).unwrap())
            .unwrap();
    assert_eq!(result["format_version"], 1);
    assert_eq!(result["min_rate"].as_f64().unwrap(), printed);
    assert_eq!(result["rate_user"].as_array().unwrap().len(), 2);
}

#[test]
fn oversubscribed_scenario_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut scenario = small_scenario();
    scenario["counts"]["k"] = serde_json::json!(3);
    scenario["users"] = serde_json::json!([
        [200.0, 300.0, 0.0], [900.0, 700.0, 0.0], [600.0, 100.0, 0.0]
    ]);
    let path = write_scenario(dir.path(), &scenario);
    let out = uavbs(&["run", &path], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("result.json").exists());
}

#[test]
fn trace_has_one_line_per_inner_iteration() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), &small_scenario());
    let out = uavbs(&["run", &path, "--trace", "--out", "."], dir.path());
    assert!(out.status.success());
    let result: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    let trace = fs::read_to_string(dir.path().join("trace.ndjson")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len() as u64, result["inner_iterations_total"].as_u64().unwrap());
    for line in lines {
        let step: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(step["z"].is_number());
    }
}

#[test]
fn sweep_single_cell_yields_one_row_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), &small_scenario());
    let args = [
        "sweep", &path, "--axis", "users", "--values", "2", "--realizations", "1",
        "--schemes", "proposed", "--seed", "9", "--out", "first",
    ];
    let out = uavbs(&args, dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read_to_string(dir.path().join("first/sweep.csv")).unwrap();
    let lines: Vec<&str> = first.lines().collect();
    assert_eq!(lines[0], "# format_version 1");
    assert_eq!(lines[1], "axis_value,scheme,mean_min_rate,stderr,runs_ok,runs_failed");
    assert_eq!(lines.len(), 3, "expected exactly one data row:\n{first}");
    assert!(lines[2].starts_with("2,proposed,"));

    let mut again = args;
    *again.last_mut().unwrap() = "second";
    assert!(uavbs(&again, dir.path()).status.success());
    let second = fs::read_to_string(dir.path().join("second/sweep.csv")).unwrap();
    assert_eq!(first, second, "sweep output must be byte-identical under a fixed seed");
}

#[test]
fn validate_accepts_good_and_rejects_user_inside_building() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_scenario(dir.path(), &small_scenario());
    assert!(uavbs(&["validate", &path], dir.path()).status.success());

    let mut bad = small_scenario();
    bad["users"][0] = serde_json::json!([420.0, 420.0, 0.0]);
    let bad_path = dir.path().join("bad.json");
    fs::write(&bad_path, bad.to_string()).unwrap();
    let out = uavbs(&["validate", bad_path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

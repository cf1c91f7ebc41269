//! Python bindings: scenario loading, solver runs, Monte-Carlo comparisons,
//! and the geometric line-of-sight test.

use std::str::FromStr;

use nalgebra::Vector3;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use uavbs_core::geometry::los_oracle;
use uavbs_core::pdlio::RunStatus;
use uavbs_core::scenario::{self, BenchmarkScheme};

/// A fully resolved scene plus algorithm parameters.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Scenario {
    inner: scenario::Scenario,
}

/// Outcome of one solver run.
#[pyclass]
struct RunResult {
    #[pyo3(get)]
    scheme: String,
    #[pyo3(get)]
    converged: bool,
    #[pyo3(get)]
    min_rate: f64,
    #[pyo3(get)]
    rate_user: Vec<f64>,
    #[pyo3(get)]
    initial_min_rate: f64,
    #[pyo3(get)]
    z_before_rounding: f64,
    #[pyo3(get)]
    z_after_rounding: f64,
    #[pyo3(get)]
    outer_iterations: usize,
    #[pyo3(get)]
    inner_iterations_total: usize,
    #[pyo3(get)]
    positions: Vec<(f64, f64, f64)>,
    #[pyo3(get)]
    powers: Vec<Vec<f64>>,
    /// Per-user (uav, subcarrier) assignment after rounding.
    #[pyo3(get)]
    assignment: Vec<(usize, usize)>,
}

/// One aggregated row of a Monte-Carlo comparison.
#[pyclass]
struct SchemeSummary {
    #[pyo3(get)]
    scheme: String,
    #[pyo3(get)]
    mean_min_rate: f64,
    #[pyo3(get)]
    std_error: f64,
    #[pyo3(get)]
    runs_ok: usize,
    #[pyo3(get)]
    runs_failed: usize,
}

fn value_err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_scheme(tag: &str) -> PyResult<BenchmarkScheme> {
    BenchmarkScheme::from_str(tag).map_err(value_err)
}

#[pymethods]
impl Scenario {
    /// Parse a scenario from its JSON representation and validate it.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Scenario> {
        let inner = scenario::Scenario::from_json(text).map_err(value_err)?;
        inner.validate().map_err(value_err)?;
        Ok(Scenario { inner })
    }

    /// Same scene and parameters with freshly sampled user positions.
    fn with_random_users(&self, seed: u64) -> PyResult<Scenario> {
        Ok(Scenario { inner: self.inner.with_random_users(seed).map_err(value_err)? })
    }

    #[getter]
    fn num_users(&self) -> usize {
        self.inner.num_users
    }

    #[getter]
    fn num_uavs(&self) -> usize {
        self.inner.num_uavs
    }

    #[getter]
    fn num_subcarriers(&self) -> usize {
        self.inner.num_subcarriers
    }

    #[getter]
    fn users(&self) -> Vec<(f64, f64, f64)> {
        self.inner.users.iter().map(|u| (u.x, u.y, u.z)).collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Solve with one scheme ("proposed", "fixed-association",
    /// "kmeans-position", or "no-geoinfo").
    #[pyo3(signature = (scheme = "proposed"))]
    fn run(&self, py: Python<'_>, scheme: &str) -> PyResult<RunResult> {
        let parsed = parse_scheme(scheme)?;
        let report = py
            .detach(|| self.inner.run_scheme(parsed))
            .map_err(value_err)?;
        let assignment = (0..self.inner.num_users)
            .map(|k| {
                let mut slot = (0usize, 0usize);
                for m in 0..self.inner.num_uavs {
                    for n in 0..self.inner.num_subcarriers {
                        if report.state.assoc[[k, m, n]] > 0.5 {
                            slot = (m, n);
                        }
                    }
                }
                slot
            })
            .collect();
        Ok(RunResult {
            scheme: scheme.to_string(),
            converged: report.status == RunStatus::Converged,
            min_rate: report.min_rate,
            rate_user: report.rate_user,
            initial_min_rate: report.initial_min_rate,
            z_before_rounding: report.z_before_rounding,
            z_after_rounding: report.z_after_rounding,
            outer_iterations: report.outer_iterations,
            inner_iterations_total: report.inner_iterations_total,
            positions: report.state.positions.iter().map(|p| (p.x, p.y, p.z)).collect(),
            powers: report.state.powers.outer_iter().map(|row| row.to_vec()).collect(),
            assignment,
        })
    }

    /// True when the straight segment from user `user_index` to `probe`
    /// clears every building.
    fn line_of_sight(&self, user_index: usize, probe: (f64, f64, f64)) -> PyResult<bool> {
        let user = self
            .inner
            .users
            .get(user_index)
            .ok_or_else(|| value_err(format!("no user {user_index}")))?;
        let x = Vector3::new(probe.0, probe.1, probe.2);
        Ok(los_oracle(user, &x, &self.inner.buildings))
    }
}

/// Mean minimum rate per scheme over independent user realizations.
#[pyfunction]
#[pyo3(signature = (template, realizations, schemes = vec![
    "proposed".to_string(), "fixed-association".to_string(),
    "kmeans-position".to_string(), "no-geoinfo".to_string()
]))]
fn monte_carlo(
    py: Python<'_>,
    template: &Scenario,
    realizations: usize,
    schemes: Vec<String>,
) -> PyResult<Vec<SchemeSummary>> {
    let parsed: Vec<BenchmarkScheme> =
        schemes.iter().map(|s| parse_scheme(s)).collect::<PyResult<_>>()?;
    let inner = template.inner.clone();
    let rows = py.detach(move || scenario::monte_carlo(&inner, realizations, &parsed));
    Ok(rows
        .into_iter()
        .map(|r| SchemeSummary {
            scheme: r.scheme.to_string(),
            mean_min_rate: r.mean_min_rate,
            std_error: r.std_error,
            runs_ok: r.runs_ok,
            runs_failed: r.runs_failed,
        })
        .collect())
}

#[pymodule]
fn uavbs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Scenario>()?;
    m.add_class::<RunResult>()?;
    m.add_class::<SchemeSummary>()?;
    m.add_function(wrap_pyfunction!(monte_carlo, m)?)?;
    Ok(())
}

//! Python bindings: scenarios, channel draws, the AO optimizer, experiment
//! runs and the verification suite.

use num_complex::Complex64;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use starris_rsma::channel::{generate_channels, trial_rng};
use starris_rsma::config::ScenarioConfig as CoreConfig;
use starris_rsma::harness::{self, ExperimentSpec, Format, RisMode, Scheme};
use starris_rsma::solver::{optimize, Init, SolveResult as CoreResult, SolverSettings};
use starris_rsma::{check, numerics, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::Json(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Physical and protocol parameters of one scenario.
#[pyclass(name = "ScenarioConfig", from_py_object)]
#[derive(Clone)]
struct PyScenario {
    inner: CoreConfig,
}

#[pymethods]
impl PyScenario {
    #[new]
    #[pyo3(signature = (users = 4, seed = 1))]
    fn new(users: usize, seed: u64) -> PyResult<Self> {
        let inner = CoreConfig::with_users(users, seed);
        inner.validate().map_err(py_err)?;
        Ok(PyScenario { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: CoreConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(PyScenario { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner)
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn users(&self) -> usize {
        self.inner.users
    }

    #[getter]
    fn ris_elements(&self) -> usize {
        self.inner.ris_elements
    }

    #[setter]
    fn set_ris_elements(&mut self, v: usize) {
        self.inner.ris_elements = v;
    }

    #[getter]
    fn power_budget(&self) -> f64 {
        self.inner.power_budget
    }

    #[setter]
    fn set_power_budget(&mut self, v: f64) {
        self.inner.power_budget = v;
    }

    #[getter]
    fn static_power(&self) -> f64 {
        self.inner.static_power
    }

    #[setter]
    fn set_static_power(&mut self, v: f64) {
        self.inner.static_power = v;
    }

    #[getter]
    fn blocklength(&self) -> f64 {
        self.inner.n_p
    }

    /// Sets both the common and the private blocklength.
    #[setter]
    fn set_blocklength(&mut self, v: f64) {
        self.inner.n_c = v;
        self.inner.n_p = v;
    }

    #[getter]
    fn eps_total(&self) -> f64 {
        self.inner.eps_total
    }

    #[setter]
    fn set_eps_total(&mut self, v: f64) {
        self.inner.eps_total = v;
    }

    #[getter]
    fn r_th(&self) -> f64 {
        self.inner.r_th
    }

    #[setter]
    fn set_r_th(&mut self, v: f64) {
        self.inner.r_th = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ScenarioConfig(K={}, M={}, P={}, P_C={}, n={}, eps={})",
            self.inner.users,
            self.inner.ris_elements,
            self.inner.power_budget,
            self.inner.static_power,
            self.inner.n_p,
            self.inner.eps_total
        )
    }
}

/// Outcome of one optimization.
#[pyclass(name = "SolveResult")]
struct PySolveResult {
    inner: CoreResult,
}

#[pymethods]
impl PySolveResult {
    /// Worst per-user efficiency in nats per channel use per watt.
    #[getter]
    fn min_ee(&self) -> f64 {
        self.inner.report.min_ee
    }

    #[getter]
    fn rates(&self) -> Vec<f64> {
        self.inner.report.r_k.clone()
    }

    #[getter]
    fn efficiencies(&self) -> Vec<f64> {
        self.inner.report.e_k.clone()
    }

    #[getter]
    fn common_shares(&self) -> Vec<f64> {
        self.inner.q.clone()
    }

    #[getter]
    fn transmit_power(&self) -> f64 {
        self.inner.ws.total_power()
    }

    #[getter]
    fn trajectory(&self) -> Vec<f64> {
        self.inner.trajectory.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[getter]
    fn status(&self) -> &'static str {
        self.inner.status.as_str()
    }

    #[getter]
    fn theta_t(&self) -> Vec<Complex64> {
        self.inner.ris.theta_t.clone()
    }

    #[getter]
    fn theta_r(&self) -> Vec<Complex64> {
        self.inner.ris.theta_r.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "SolveResult(min_ee={:.6}, iterations={}, status={})",
            self.inner.report.min_ee,
            self.inner.iterations,
            self.inner.status.as_str()
        )
    }
}

/// Optimizes one channel draw (`trial`) of `cfg` for a scheme and surface mode.
#[pyfunction]
#[pyo3(signature = (cfg, scheme = "rsma", ris_mode = "star", trial = 0))]
fn solve(
    py: Python<'_>,
    cfg: &PyScenario,
    scheme: &str,
    ris_mode: &str,
    trial: u64,
) -> PyResult<PySolveResult> {
    let scheme: Scheme = scheme.parse().map_err(py_err)?;
    let mode: RisMode = ris_mode.parse().map_err(py_err)?;
    let cfg = cfg.inner.clone();
    let inner = py
        .detach(move || -> starris_rsma::Result<CoreResult> {
            let cs = generate_channels(&cfg, &mut trial_rng(cfg.seed, trial))?;
            let problem = harness::wire_baseline(scheme, mode, &cfg, trial)?;
            optimize(
                &cs,
                &cfg,
                &SolverSettings::default(),
                &problem,
                Init::Default,
            )
        })
        .map_err(py_err)?;
    Ok(PySolveResult { inner })
}

/// Runs an experiment config (JSON text) and returns the rows as CSV or JSON text.
#[pyfunction]
#[pyo3(signature = (config_json, format = "csv"))]
fn run_experiment(py: Python<'_>, config_json: &str, format: &str) -> PyResult<String> {
    let format: Format = format.parse().map_err(py_err)?;
    let spec = ExperimentSpec::from_json(config_json).map_err(py_err)?;
    let bytes = py
        .detach(move || -> starris_rsma::Result<Vec<u8>> {
            let rows = harness::run_experiment(&spec)?;
            let mut buf = Vec::new();
            harness::write_rows(&rows, format, &mut buf)?;
            Ok(buf)
        })
        .map_err(py_err)?;
    String::from_utf8(bytes).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs verification criteria; returns `(id, name, passed, detail)` tuples.
#[pyfunction]
#[pyo3(signature = (ids = None))]
fn run_checks(py: Python<'_>, ids: Option<Vec<u8>>) -> Vec<(u8, String, bool, String)> {
    let ids = ids.unwrap_or_else(|| check::ALL.to_vec());
    py.detach(move || {
        check::run(&ids)
            .into_iter()
            .map(|o| (o.id, o.name.to_string(), o.passed, o.detail))
            .collect()
    })
}

/// Gaussian tail probability.
#[pyfunction]
fn q_function(x: f64) -> f64 {
    numerics::q_function(x)
}

/// Inverse of the Gaussian tail probability.
#[pyfunction]
fn inv_q(eps: f64) -> PyResult<f64> {
    numerics::inv_q(eps).map_err(py_err)
}

#[pymodule]
fn starris(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PySolveResult>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(run_checks, m)?)?;
    m.add_function(wrap_pyfunction!(q_function, m)?)?;
    m.add_function(wrap_pyfunction!(inv_q, m)?)?;
    Ok(())
}

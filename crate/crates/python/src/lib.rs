//! Python extension module `cpokit`.
//!
//! Exposes the single-step updates (PCPO, TRPO) on explicit curvature
//! matrices, run configurations with training, and the verification suites.
//! Structured results cross the boundary as plain dicts and lists.

use cpokit_core::baselines::trpo_update as core_trpo_update;
use cpokit_core::linalg::{CgConfig, DenseMatrix, SpdOperator};
use cpokit_core::subproblem::{pcpo_update as core_pcpo_update, ProjectionMetric, UpdateInputs};
use cpokit_core::trainer::{train, Algorithm, RunConfig as CoreRunConfig, RunSummary, TrainError};
use cpokit_core::verification::{run_suite, Suite, VerifyOptions};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde::Serialize;
use serde_json::Value;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn train_err(e: TrainError) -> PyErr {
    match e {
        TrainError::Config(_) | TrainError::Json(_) => value_err(e),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(u)) => u.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let list = PyList::empty(py);
            for x in items {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(map) => {
            let dict = PyDict::new(py);
            for (k, x) in map {
                dict.set_item(k, json_to_py(py, x)?)?;
            }
            dict.into_any()
        }
    })
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let value = serde_json::to_value(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    json_to_py(py, &value)
}

fn inputs(
    theta: Vec<f64>,
    g: Vec<f64>,
    a: Vec<f64>,
    b: f64,
    hessian: Vec<Vec<f64>>,
    delta: f64,
) -> PyResult<UpdateInputs> {
    let n = theta.len();
    let m = DenseMatrix::from_rows(&hessian).map_err(value_err)?;
    let op = SpdOperator::from_matrix(m, 0.0).map_err(value_err)?;
    Ok(UpdateInputs::new(theta, g, a, b, op, delta)
        .map_err(value_err)?
        .with_cg(CgConfig::exact(n)))
}

/// One PCPO update with explicit curvature `hessian` (list of rows).
///
/// Returns a dict with `theta_next`, `eta`, `projection_active` and
/// `lagrange_cost`.
#[pyfunction]
#[pyo3(signature = (theta, g, a, b, hessian, delta, metric = "kl"))]
#[allow(clippy::too_many_arguments)]
fn pcpo_update<'py>(
    py: Python<'py>,
    theta: Vec<f64>,
    g: Vec<f64>,
    a: Vec<f64>,
    b: f64,
    hessian: Vec<Vec<f64>>,
    delta: f64,
    metric: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let metric = match metric {
        "kl" => ProjectionMetric::Kl,
        "l2" => ProjectionMetric::L2,
        other => return Err(value_err(format!("metric must be 'kl' or 'l2', got '{other}'"))),
    };
    let inp = inputs(theta, g, a, b, hessian, delta)?;
    let res = core_pcpo_update(&inp, metric).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let d = PyDict::new(py);
    d.set_item("theta_next", res.theta_next)?;
    d.set_item("eta", res.eta)?;
    d.set_item("projection_active", res.projection_active)?;
    d.set_item("lagrange_cost", res.lagrange_cost)?;
    Ok(d)
}

/// Trust-region natural-gradient step; the constraint is ignored.
#[pyfunction]
fn trpo_update(theta: Vec<f64>, g: Vec<f64>, hessian: Vec<Vec<f64>>, delta: f64) -> PyResult<Vec<f64>> {
    let a = vec![0.0; theta.len()];
    let inp = inputs(theta, g, a, 0.0, hessian, delta)?;
    core_trpo_update(&inp).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Training run configuration (the same JSON schema the CLI reads).
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: CoreRunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new(json: &str) -> PyResult<Self> {
        let inner = CoreRunConfig::from_json(json).map_err(train_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(value_err)
    }

    #[getter]
    fn algorithm(&self) -> &'static str {
        self.inner.algorithm.name()
    }

    #[setter]
    fn set_algorithm(&mut self, name: &str) -> PyResult<()> {
        self.inner.algorithm = name.parse::<Algorithm>().map_err(value_err)?;
        Ok(())
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }

    #[setter]
    fn set_iterations(&mut self, n: usize) {
        self.inner.iterations = n;
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }

    #[setter]
    fn set_delta(&mut self, delta: f64) {
        self.inner.delta = delta;
    }

    /// Cost threshold of the configured environment.
    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.spec.h()
    }

    /// Train with this configuration, releasing the GIL while it runs.
    fn train(&self, py: Python<'_>) -> PyResult<PyTrainResult> {
        let cfg = self.inner.clone();
        let out = py.detach(move || train(&cfg).map(|out| (RunSummary::new(&cfg, &out), out)));
        let (summary, out) = out.map_err(train_err)?;
        Ok(PyTrainResult {
            summary: serde_json::to_value(&summary).map_err(value_err)?,
            records: serde_json::to_value(&out.records).map_err(value_err)?,
            final_theta: out.final_params.theta().to_vec(),
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(algorithm='{}', seed={}, iterations={}, delta={})",
            self.inner.algorithm.name(),
            self.inner.seed,
            self.inner.iterations,
            self.inner.delta
        )
    }
}

/// Outcome of `RunConfig.train()`.
#[pyclass(name = "TrainResult", frozen)]
struct PyTrainResult {
    summary: Value,
    records: Value,
    final_theta: Vec<f64>,
}

#[pymethods]
impl PyTrainResult {
    /// Run summary (same content as `run.json`).
    #[getter]
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.summary)
    }

    /// One dict per iteration.
    #[getter]
    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.records)
    }

    #[getter]
    fn final_theta(&self) -> Vec<f64> {
        self.final_theta.clone()
    }

    fn __len__(&self) -> usize {
        self.records.as_array().map_or(0, Vec::len)
    }
}

/// Run one verification suite; returns its report as a dict with a
/// `passed` flag added.
#[pyfunction]
#[pyo3(signature = (suite, out_dir = None, jobs = 1))]
fn verify<'py>(py: Python<'py>, suite: &str, out_dir: Option<std::path::PathBuf>, jobs: usize) -> PyResult<Bound<'py, PyAny>> {
    let suite: Suite = suite.parse().map_err(value_err)?;
    let opts = VerifyOptions { out_dir, jobs };
    let report = py
        .detach(|| run_suite(suite, &opts))
        .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    let obj = to_py(py, &report)?;
    obj.set_item("passed", report.passed())?;
    Ok(obj)
}

#[pymodule]
fn cpokit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(pcpo_update, m)?)?;
    m.add_function(wrap_pyfunction!(trpo_update, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyTrainResult>()?;
    m.add("ALGORITHMS", Algorithm::ALL.iter().map(|a| a.name()).collect::<Vec<_>>())?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

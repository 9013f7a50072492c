//! Python bindings: config checking, a few closed-form helpers and the
//! experiment commands. Reports come back as JSON strings.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use uniflow::harness::runners::{self, RunContext};
use uniflow::harness::ExperimentConfig;
use uniflow::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config { pointer, reason } => PyValueError::new_err(format!("config error at \"{pointer}\": {reason}")),
        Error::Invalid { .. } | Error::NonFinite(_) | Error::LengthMismatch { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn load(config_json: &str, out_dir: Option<String>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_json(config_json).map_err(to_py)?;
    if let Some(dir) = out_dir {
        cfg.output.dir = dir.into();
    }
    Ok(cfg)
}

/// Validates a JSON config and returns its hash.
#[pyfunction]
fn config_hash(config_json: &str) -> PyResult<String> {
    Ok(load(config_json, None)?.hash())
}

/// Steps of committed prefix for a given inference latency and control period.
#[pyfunction]
#[pyo3(signature = (latency_s, period_s, safety_steps = 1))]
fn commit_delay(latency_s: f64, period_s: f64, safety_steps: usize) -> PyResult<usize> {
    uniflow::uac::commit_delay(latency_s, period_s, safety_steps).map_err(to_py)
}

/// exp(-d / tau).
#[pyfunction]
fn gate(d: f64, tau: f64) -> PyResult<f64> {
    uniflow::mpg::gate(d, tau).map_err(to_py)
}

/// Runs one of `session`, `bench`, `train_toy`, `ablate_mpg`, `ablate_uac`
/// and returns the report.
#[pyfunction]
#[pyo3(signature = (command, config_json, out_dir = None))]
fn run(py: Python<'_>, command: &str, config_json: &str, out_dir: Option<String>) -> PyResult<String> {
    let ctx = RunContext::new(load(config_json, out_dir)?);
    let f = match command {
        "session" => runners::session,
        "bench" => runners::bench,
        "train_toy" => runners::train_toy,
        "ablate_mpg" => runners::ablate_mpg_cmd,
        "ablate_uac" => runners::ablate_uac_cmd,
        other => return Err(PyValueError::new_err(format!("unknown command {other:?}"))),
    };
    let report = py.detach(|| f(&ctx)).map_err(to_py)?;
    Ok(report.to_string())
}

/// Runs acceptance criteria; returns (id, name, passed, detail) tuples.
#[pyfunction]
#[pyo3(signature = (config_json, only = Vec::new(), out_dir = None))]
fn verify(
    py: Python<'_>,
    config_json: &str,
    only: Vec<u8>,
    out_dir: Option<String>,
) -> PyResult<Vec<(u8, String, bool, String)>> {
    let ctx = RunContext::new(load(config_json, out_dir)?);
    let results = py.detach(|| runners::verify(&ctx, &only, |_| {})).map_err(to_py)?;
    Ok(results.into_iter().map(|r| (r.id, r.name.to_string(), r.passed, r.detail)).collect())
}

#[pymodule]
fn uniflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(commit_delay, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}

//! Python module `iterboot_py`. Each exported function is a thin wrapper
//! over a plain Rust function in [`api`] so the logic is testable without
//! an interpreter.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

pub mod api {
    use iterboot::bindings::LogisticBinding;
    use iterboot::estimators::{EstimatorKind, EstimatorSpec, FitResult};
    use iterboot::harness::{run_setting, SimSetting};
    use iterboot::ib::{ib_run, IbConfig, IbOutcome, Simulations};
    use iterboot::oracle::{self, OracleCheck};
    use iterboot::sim::LogisticDesign;
    use iterboot::toy::{Toy, VarianceToy};
    use nalgebra::{DMatrix, DVector};

    #[derive(Debug, Clone, PartialEq)]
    pub enum ApiError {
        /// Bad arguments.
        Usage(String),
        /// The computation itself failed.
        Numerical(String),
    }

    fn usage(e: impl std::fmt::Display) -> ApiError {
        ApiError::Usage(e.to_string())
    }

    fn numerical(e: impl std::fmt::Display) -> ApiError {
        ApiError::Numerical(e.to_string())
    }

    pub fn parse_kind(kind: &str) -> Result<EstimatorKind, ApiError> {
        serde_json::from_value(serde_json::Value::String(kind.to_string()))
            .map_err(|_| usage(format!("unknown estimator `{kind}`")))
    }

    pub fn design(x: &[Vec<f64>]) -> Result<LogisticDesign, ApiError> {
        let q = x.first().map_or(0, Vec::len);
        if x.is_empty() || q == 0 {
            return Err(usage("x must be a non-empty list of non-empty rows"));
        }
        if let Some(i) = x.iter().position(|r| r.len() != q) {
            return Err(usage(format!("row {i} has {} columns, expected {q}", x[i].len())));
        }
        let m = DMatrix::from_fn(x.len(), q, |i, j| x[i][j]);
        LogisticDesign::new(m).map_err(usage)
    }

    fn spec(kind: &str, delta: f64) -> Result<EstimatorSpec, ApiError> {
        let kind = parse_kind(kind)?;
        if matches!(kind, EstimatorKind::GlmmPirls | EstimatorKind::GlmmGhq) {
            return Err(usage("only logistic estimators are exposed"));
        }
        Ok(EstimatorSpec::new(kind).with_delta(delta))
    }

    pub fn fit_logistic(x: &[Vec<f64>], y: &[f64], kind: &str, delta: f64) -> Result<FitResult, ApiError> {
        let d = design(x)?;
        spec(kind, delta)?.fit_logistic(&d, &DVector::from_column_slice(y)).map_err(usage)
    }

    pub fn ib_logistic(
        x: &[Vec<f64>],
        y: &[f64],
        kind: &str,
        delta: f64,
        h: usize,
        seed: u64,
    ) -> Result<IbOutcome, ApiError> {
        let b = LogisticBinding::new(design(x)?, spec(kind, delta)?).map_err(usage)?;
        let pi = b.estimate(&DVector::from_column_slice(y)).map_err(usage)?;
        if !pi.is_usable() {
            return Err(numerical("initial estimator did not converge on the observed data"));
        }
        ib_run(&pi.theta_hat, &b, &IbConfig::monte_carlo(h, seed)).map_err(numerical)
    }

    /// `h = None` iterates on the closed-form binding.
    pub fn ib_variance_toy(pi_obs: f64, n: usize, h: Option<usize>, seed: u64) -> Result<IbOutcome, ApiError> {
        let toy = Toy::Variance(VarianceToy::new(n).map_err(usage)?);
        let cfg = IbConfig { simulations: h.map_or(Simulations::Exact, Simulations::MonteCarlo), seed, ..IbConfig::default() };
        ib_run(&DVector::from_element(1, pi_obs), &toy, &cfg).map_err(numerical)
    }

    pub fn study_csv(preset: &str, replicates: Option<usize>, seed: u64, workers: Option<usize>) -> Result<String, ApiError> {
        let mut s = SimSetting::preset(preset).ok_or_else(|| usage(format!("unknown preset `{preset}`")))?;
        if let Some(r) = replicates {
            s.replicates = r;
        }
        let report = run_setting(&s, seed, workers).map_err(numerical)?;
        let mut buf = Vec::new();
        report.write_csv(&mut buf).map_err(numerical)?;
        String::from_utf8(buf).map_err(numerical)
    }

    pub fn oracle_check(fixtures: Option<&str>) -> Result<Vec<OracleCheck>, ApiError> {
        let dir = fixtures.map_or_else(oracle::fixture_dir, std::path::PathBuf::from);
        oracle::check_fixtures(&dir).map_err(usage)
    }
}

fn to_py(e: api::ApiError) -> PyErr {
    match e {
        api::ApiError::Usage(m) => PyValueError::new_err(m),
        api::ApiError::Numerical(m) => PyRuntimeError::new_err(m),
    }
}

fn outcome_dict<'py>(py: Python<'py>, out: &iterboot::ib::IbOutcome) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("theta_hat", out.theta.iter().copied().collect::<Vec<f64>>())?;
    d.set_item("converged", out.trace.converged)?;
    d.set_item("iterations", out.trace.iterates.len().saturating_sub(1))?;
    d.set_item("residual_norm", out.trace.residual_norm)?;
    Ok(d)
}

/// Fit a logistic estimator; `kind` is `logistic_mle`, `logistic_firth` or
/// `logistic_robust`.
#[pyfunction]
#[pyo3(signature = (x, y, kind = "logistic_mle", delta = 0.0))]
fn fit_logistic<'py>(py: Python<'py>, x: Vec<Vec<f64>>, y: Vec<f64>, kind: &str, delta: f64) -> PyResult<Bound<'py, PyDict>> {
    let fit = api::fit_logistic(&x, &y, kind, delta).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("theta_hat", fit.theta_hat.iter().copied().collect::<Vec<f64>>())?;
    d.set_item("converged", fit.converged)?;
    d.set_item("iterations", fit.iterations)?;
    d.set_item("final_grad_norm", fit.final_grad_norm)?;
    Ok(d)
}

#[pyfunction]
#[pyo3(signature = (x, y, kind = "logistic_mle", delta = 0.01, h = 100, seed = 0))]
fn ib_logistic<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<f64>,
    kind: &str,
    delta: f64,
    h: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let out = api::ib_logistic(&x, &y, kind, delta, h, seed).map_err(to_py)?;
    outcome_dict(py, &out)
}

#[pyfunction]
#[pyo3(signature = (pi_obs, n, h = None, seed = 0))]
fn ib_variance_toy<'py>(py: Python<'py>, pi_obs: f64, n: usize, h: Option<usize>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let out = api::ib_variance_toy(pi_obs, n, h, seed).map_err(to_py)?;
    outcome_dict(py, &out)
}

/// Summary CSV of a named study preset.
#[pyfunction]
#[pyo3(signature = (preset, replicates = None, seed = 1, workers = None))]
fn study_csv(py: Python<'_>, preset: &str, replicates: Option<usize>, seed: u64, workers: Option<usize>) -> PyResult<String> {
    py.detach(|| api::study_csv(preset, replicates, seed, workers)).map_err(to_py)
}

/// `(name, max_abs_error, tolerance, pass)` per reference check.
#[pyfunction]
#[pyo3(signature = (fixtures = None))]
fn oracle_check(fixtures: Option<&str>) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let checks = api::oracle_check(fixtures).map_err(to_py)?;
    Ok(checks.into_iter().map(|c| (c.name, c.max_abs_error, c.tolerance, c.pass)).collect())
}

#[pymodule]
fn iterboot_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("PRESETS", iterboot::harness::SimSetting::PRESETS.to_vec())?;
    m.add_function(wrap_pyfunction!(fit_logistic, m)?)?;
    m.add_function(wrap_pyfunction!(ib_logistic, m)?)?;
    m.add_function(wrap_pyfunction!(ib_variance_toy, m)?)?;
    m.add_function(wrap_pyfunction!(study_csv, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_check, m)?)?;
    Ok(())
}

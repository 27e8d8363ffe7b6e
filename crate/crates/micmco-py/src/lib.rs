//! Python bindings: the per-example estimators, exact tiny-model oracles,
//! training from config text, checkpoint evaluation, the property audit and
//! Pareto frontiers.

use std::path::PathBuf;

use micmco::cli::{self, ParetoPoint};
use micmco::models::{read_checkpoint, write_checkpoint, ModelParams};
use micmco::objectives::{self as obj, BoundForm, ObjectiveKind, ObjectiveSpec};
use micmco::oracle;
use micmco::trainer::{self, Dataset, TrainStatus};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(pymicmco, MicmcoError, PyException);

fn err(e: micmco::Error) -> PyErr {
    MicmcoError::new_err(e.to_string())
}

fn form(name: &str) -> PyResult<BoundForm> {
    match name {
        "iwae" => Ok(BoundForm::LogMeanExp),
        "elbo" => Ok(BoundForm::Mean),
        other => Err(PyValueError::new_err(format!(
            "form must be `iwae` or `elbo`, got `{other}`"
        ))),
    }
}

/// K log-weight triples `(ln p(x|z), ln p(z), ln q(z|x))` for one observation.
#[pyclass(name = "LogWeights", frozen)]
struct PyLogWeights(obj::LogWeights);

#[pymethods]
impl PyLogWeights {
    #[new]
    fn new(log_lik: Vec<f64>, log_prior: Vec<f64>, log_prop: Vec<f64>) -> PyResult<Self> {
        obj::LogWeights::new(log_lik, log_prior, log_prop)
            .map(Self)
            .map_err(err)
    }

    #[getter]
    fn k(&self) -> usize {
        self.0.k()
    }

    #[pyo3(signature = (form = "iwae"))]
    fn s_hat(&self, form: &str) -> PyResult<f64> {
        Ok(obj::s_hat(&self.0, self::form(form)?))
    }

    #[pyo3(signature = (alpha, form = "iwae"))]
    fn s_hat_alpha(&self, alpha: f64, form: &str) -> PyResult<f64> {
        Ok(obj::s_hat_alpha_form(&self.0, alpha, self::form(form)?))
    }

    fn u_hat(&self) -> f64 {
        obj::u_hat(&self.0)
    }

    /// `Û − Ŝ` with the importance-weighted `Ŝ`.
    fn kl_estimate(&self) -> f64 {
        obj::kl_estimate(&self.0, obj::s_hat_iwae(&self.0))
    }

    fn renyi_estimate(&self, alpha: f64) -> PyResult<f64> {
        let out = obj::objective_renyi(&self.0, &self.0, 0.0, alpha, BoundForm::LogMeanExp).map_err(err)?;
        Ok(out.diagnostics.renyi_est.unwrap_or(f64::NAN))
    }

    fn __repr__(&self) -> String {
        format!("LogWeights(k={})", self.0.k())
    }
}

/// Value and by-products of one objective estimate.
#[pyclass(name = "ObjectiveValue", frozen, get_all)]
struct PyObjectiveValue {
    value: f64,
    s_hat: f64,
    u_hat: Option<f64>,
    kl_est: Option<f64>,
    s_alpha_hat: Option<f64>,
    renyi_est: Option<f64>,
    implied_lambda: Option<f64>,
}

/// Evaluates `none`, `kl`, `renyi` or `power` on one example. `mi` is an
/// optional separate batch for the KL / Rényi term.
#[pyfunction]
#[pyo3(signature = (lik, objective = "none", lam = None, alpha = None, mi = None, form = "iwae"))]
fn objective_value(
    lik: &PyLogWeights,
    objective: &str,
    lam: Option<f64>,
    alpha: Option<f64>,
    mi: Option<&PyLogWeights>,
    form: &str,
) -> PyResult<PyObjectiveValue> {
    let kind: ObjectiveKind = objective.parse().map_err(err)?;
    let spec = match kind {
        ObjectiveKind::None => ObjectiveSpec::none(),
        ObjectiveKind::Kl => ObjectiveSpec::kl(lam.unwrap_or(0.0)),
        ObjectiveKind::Renyi => ObjectiveSpec::renyi(lam.unwrap_or(0.0), alpha.unwrap_or(f64::NAN)),
        ObjectiveKind::Power => ObjectiveSpec::power(alpha.unwrap_or(f64::NAN)),
    };
    spec.validate().map_err(err)?;
    let out = obj::objective_value(&spec, self::form(form)?, &lik.0, mi.map(|m| &m.0)).map_err(err)?;
    let d = out.diagnostics;
    Ok(PyObjectiveValue {
        value: out.value,
        s_hat: d.s_hat,
        u_hat: d.u_hat,
        kl_est: d.kl_est,
        s_alpha_hat: d.s_alpha_hat,
        renyi_est: d.renyi_est,
        implied_lambda: d.implied_lambda,
    })
}

/// A fully enumerable model: prior over Z, `lik[z][x]`, `proposal[x][z]`.
#[pyclass(name = "TinyModel", frozen)]
struct PyTinyModel(oracle::TinyModel);

impl PyTinyModel {
    fn check_x(&self, x: usize) -> PyResult<()> {
        if x >= self.0.n_x() {
            return Err(PyValueError::new_err(format!(
                "x = {x} out of range for |X| = {}",
                self.0.n_x()
            )));
        }
        Ok(())
    }
}

#[pymethods]
impl PyTinyModel {
    #[new]
    fn new(prior: Vec<f64>, lik: Vec<Vec<f64>>, proposal: Vec<Vec<f64>>) -> PyResult<Self> {
        oracle::TinyModel::new(prior, lik, proposal).map(Self).map_err(err)
    }

    #[getter]
    fn n_z(&self) -> usize {
        self.0.n_z()
    }

    #[getter]
    fn n_x(&self) -> usize {
        self.0.n_x()
    }

    /// `ln p(x)`.
    fn log_marginal(&self, x: usize) -> PyResult<f64> {
        self.check_x(x)?;
        Ok(oracle::exact_marginal(&self.0, x))
    }

    fn posterior(&self, x: usize) -> PyResult<Vec<f64>> {
        self.check_x(x)?;
        Ok(oracle::exact_posterior(&self.0, x))
    }

    /// `KL(p(z|x) ‖ p(z))`.
    fn posterior_kl(&self, x: usize) -> PyResult<f64> {
        self.check_x(x)?;
        Ok(oracle::exact_posterior_kl(&self.0, x))
    }

    /// `KL(q(z|x) ‖ p(z))`.
    fn representational_kl(&self, x: usize) -> PyResult<f64> {
        self.check_x(x)?;
        Ok(oracle::exact_representational_kl(&self.0, x))
    }

    /// `ln p^α(x) = ln Σ_z p(z) p(x|z)^α`.
    fn log_p_alpha(&self, x: usize, alpha: f64) -> PyResult<f64> {
        self.check_x(x)?;
        Ok(oracle::exact_p_alpha(&self.0, x, alpha))
    }

    fn renyi(&self, x: usize, alpha: f64) -> PyResult<f64> {
        self.check_x(x)?;
        oracle::exact_renyi(&self.0, x, alpha).map_err(err)
    }

    fn log_weights(&self, x: usize, zs: Vec<usize>) -> PyResult<PyLogWeights> {
        self.check_x(x)?;
        if zs.is_empty() || zs.iter().any(|&z| z >= self.0.n_z()) {
            return Err(PyValueError::new_err("need at least one z, each below |Z|"));
        }
        Ok(PyLogWeights(self.0.log_weights(x, &zs)))
    }
}

#[pyclass(name = "MetricRecord", frozen, get_all)]
struct PyMetricRecord {
    step: usize,
    nll: f64,
    avg_kl: f64,
    lambda_: f64,
    alpha: f64,
    seed: u64,
}

/// Trained (or loaded) encoder/decoder parameters.
#[pyclass(name = "Model", frozen)]
struct PyModel(ModelParams);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        read_checkpoint(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        write_checkpoint(&path, &self.0).map_err(err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    #[getter]
    fn num_scalars(&self) -> usize {
        self.0.num_scalars()
    }

    /// `(nll, avg_kl)` on the fixed held-out symbols.
    #[pyo3(signature = (eval_k = 100, seed = 0))]
    fn evaluate(&self, py: Python<'_>, eval_k: usize, seed: u64) -> PyResult<(f64, f64)> {
        if eval_k == 0 {
            return Err(PyValueError::new_err("eval_k must be ≥ 1"));
        }
        let r = py.detach(|| cli::eval_params(&self.0, eval_k, seed)).map_err(err)?;
        Ok((r.nll, r.avg_kl))
    }
}

#[pyclass(name = "TrainResult", frozen)]
struct PyTrainResult {
    #[pyo3(get)]
    history: Vec<Py<PyMetricRecord>>,
    #[pyo3(get)]
    objective_trace: Vec<f64>,
    /// `None` when training completed.
    #[pyo3(get)]
    abort: Option<String>,
    #[pyo3(get)]
    model: Py<PyModel>,
}

/// Trains on the synthetic uniform task described by config text
/// (`key = value` lines). Nothing is written to disk.
#[pyfunction]
#[pyo3(signature = (config, seed = None))]
fn train(py: Python<'_>, config: &str, seed: Option<u64>) -> PyResult<PyTrainResult> {
    let mut raw = cli::RawConfig::parse(config).map_err(err)?;
    if let Some(s) = seed {
        raw.set("seed", s.to_string()).map_err(err)?;
    }
    let cfg = raw.resolve().map_err(err)?;
    let run = py
        .detach(|| trainer::train(&cfg.train, &Dataset::synthetic(cfg.train.vocab_size)))
        .map_err(err)?;
    let history = run
        .history
        .iter()
        .map(|r| {
            Py::new(
                py,
                PyMetricRecord {
                    step: r.step,
                    nll: r.nll,
                    avg_kl: r.avg_kl,
                    lambda_: r.lambda,
                    alpha: r.alpha,
                    seed: r.seed,
                },
            )
        })
        .collect::<PyResult<_>>()?;
    let abort = match &run.status {
        TrainStatus::Completed => None,
        TrainStatus::Aborted { step, error } => Some(format!("aborted at step {step}: {error}")),
    };
    Ok(PyTrainResult {
        history,
        objective_trace: run.objective_trace,
        abort,
        model: Py::new(py, PyModel(run.params))?,
    })
}

#[pyclass(name = "AuditRow", frozen, get_all)]
struct PyAuditRow {
    property: String,
    check: String,
    seed: u64,
    passed: bool,
    detail: String,
}

/// Runs the exact-enumeration property checks.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn audit(py: Python<'_>, seed: u64) -> PyResult<Vec<PyAuditRow>> {
    let rows = py.detach(|| cli::run_audit(seed)).map_err(err)?;
    Ok(rows
        .into_iter()
        .map(|r| PyAuditRow {
            property: r.property.to_string(),
            check: r.check,
            seed: r.seed,
            passed: r.passed,
            detail: r.detail,
        })
        .collect())
}

/// Non-dominated `(avg_kl, nll, run_id)` triples (higher avg_kl and lower
/// nll are better), ascending in avg_kl.
#[pyfunction]
fn pareto_frontier(points: Vec<(f64, f64, String)>) -> Vec<(f64, f64, String)> {
    let points: Vec<ParetoPoint> = points
        .into_iter()
        .map(|(avg_kl, nll, run_id)| ParetoPoint { avg_kl, nll, run_id })
        .collect();
    cli::pareto_frontier(&points)
        .into_iter()
        .map(|p| (p.avg_kl, p.nll, p.run_id))
        .collect()
}

#[pymodule]
fn pymicmco(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MicmcoError", m.py().get_type::<MicmcoError>())?;
    m.add_class::<PyLogWeights>()?;
    m.add_class::<PyObjectiveValue>()?;
    m.add_class::<PyTinyModel>()?;
    m.add_class::<PyMetricRecord>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_class::<PyAuditRow>()?;
    m.add_function(wrap_pyfunction!(objective_value, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(audit, m)?)?;
    m.add_function(wrap_pyfunction!(pareto_frontier, m)?)?;
    Ok(())
}

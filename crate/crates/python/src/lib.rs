//! Python bindings for the cascade models, realizations and estimators.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use mfcascade::analysis;
use mfcascade::experiment::{self, ExperimentConfig};
use mfcascade::growthspeed;
use mfcascade::{CascadeTree, Construction, EpsSequence, MassField, ModelSpec, WeightModel, Word};

fn err(e: mfcascade::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn eps_from(eta: Option<f64>, constant: Option<f64>) -> PyResult<EpsSequence> {
    match (eta, constant) {
        (Some(_), Some(_)) => Err(PyValueError::new_err("give either eta or constant, not both")),
        (_, Some(value)) => Ok(EpsSequence::Constant { value }),
        (eta, None) => Ok(EpsSequence::RootLog { eta: eta.unwrap_or(0.5) }),
    }
}

/// Law of the weight vector `(W_0, ..., W_{b-1})`.
#[pyclass(name = "WeightModel", module = "mfcascade_py", frozen)]
struct PyWeightModel {
    inner: Arc<WeightModel>,
}

#[pymethods]
impl PyWeightModel {
    #[staticmethod]
    fn deterministic(b: u32, weights: Vec<f64>) -> PyResult<Self> {
        Ok(PyWeightModel { inner: Arc::new(WeightModel::deterministic(b, weights).map_err(err)?) })
    }

    #[staticmethod]
    fn lebesgue(b: u32) -> PyResult<Self> {
        Ok(PyWeightModel { inner: Arc::new(WeightModel::lebesgue(b).map_err(err)?) })
    }

    #[staticmethod]
    fn lognormal(b: u32, sigma2: f64) -> PyResult<Self> {
        Ok(PyWeightModel { inner: Arc::new(WeightModel::lognormal(b, sigma2).map_err(err)?) })
    }

    #[staticmethod]
    #[pyo3(signature = (b, low, high, p_low=None))]
    fn two_point(b: u32, low: f64, high: f64, p_low: Option<f64>) -> PyResult<Self> {
        let m = match p_low {
            Some(p) => WeightModel::two_point_with_p(b, low, high, p),
            None => WeightModel::two_point(b, low, high),
        };
        Ok(PyWeightModel { inner: Arc::new(m.map_err(err)?) })
    }

    /// Builds a model from its TOML description.
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let spec = ModelSpec::from_text(text).map_err(err)?;
        Ok(PyWeightModel { inner: Arc::new(spec.build().map_err(err)?) })
    }

    #[getter]
    fn base(&self) -> u32 {
        self.inner.base()
    }

    fn tau_tilde(&self, q: f64) -> f64 {
        self.inner.tau_tilde(q).value()
    }

    fn tau_tilde_prime(&self, q: f64) -> f64 {
        self.inner.tau_tilde_prime(q).value
    }

    /// `qτ̃'(q) - τ̃(q)`.
    fn legendre_at_tangency(&self, q: f64) -> f64 {
        self.inner.legendre_at_tangency(q)
    }

    /// Numerical Legendre transform `τ*(α)` of τ̃.
    fn legendre(&self, alpha: f64) -> f64 {
        analysis::model_legendre(&self.inner, alpha).value
    }

    /// Endpoints of `J = {q : qτ̃'(q) - τ̃(q) > 0}`.
    fn j_interval(&self) -> PyResult<(f64, f64)> {
        let j = self.inner.j_interval().map_err(err)?;
        Ok((j.lo, j.hi))
    }

    fn classify(&self) -> String {
        format!("{:?}", self.inner.classify())
    }

    fn __repr__(&self) -> String {
        format!("WeightModel({})", self.inner.label())
    }
}

/// Masses of one realization at depths `0..=depth`.
#[pyclass(name = "MassField", module = "mfcascade_py", frozen)]
struct PyMassField {
    inner: MassField,
}

#[pymethods]
impl PyMassField {
    #[staticmethod]
    fn from_leaf_masses(b: u32, masses: Vec<f64>) -> PyResult<Self> {
        Ok(PyMassField { inner: MassField::from_leaf_masses(b, masses).map_err(err)? })
    }

    #[getter]
    fn depth(&self) -> u32 {
        self.inner.depth()
    }

    #[getter]
    fn base(&self) -> u32 {
        self.inner.base()
    }

    fn masses(&self, depth: u32) -> Vec<f64> {
        self.inner.masses(depth)
    }

    fn total_mass(&self) -> f64 {
        self.inner.total_mass()
    }

    /// `τ_n(q) = -(1/n) log_b Σ μ(I_w)^q`.
    fn partition_function(&self, n: u32, q: f64) -> PyResult<f64> {
        analysis::partition_function(&self.inner, n, q).map_err(err)
    }

    fn box_count(&self, n: u32, alpha: f64, epsilon: f64) -> PyResult<u64> {
        analysis::box_count(&self.inner, n, alpha, epsilon).map_err(err)
    }

    #[pyo3(signature = (mu, alpha, radius=1, eta=None, constant=None, fraction=0.5, n_max=None))]
    #[allow(clippy::too_many_arguments)]
    fn growth_speed(
        &self,
        mu: &PyMassField,
        alpha: f64,
        radius: u64,
        eta: Option<f64>,
        constant: Option<f64>,
        fraction: f64,
        n_max: Option<u32>,
    ) -> PyResult<Option<u32>> {
        let eps = eps_from(eta, constant)?;
        let n_max = n_max.unwrap_or(self.inner.depth().min(mu.inner.depth()));
        growthspeed::growth_speed(&self.inner, &mu.inner, alpha, radius, &eps, fraction, n_max).map_err(err)
    }

    #[pyo3(signature = (mu, alpha, radius, epsilon, eta, n))]
    fn s_diagnostic(&self, mu: &PyMassField, alpha: f64, radius: u64, epsilon: f64, eta: f64, n: u32) -> PyResult<f64> {
        growthspeed::s_diagnostic(&self.inner, &mu.inner, alpha, radius, epsilon, eta, n).map_err(err)
    }

    fn to_csv(&self, path: PathBuf) -> PyResult<()> {
        let file = std::fs::File::create(path).map_err(|e| err(e.into()))?;
        self.inner.write_csv(std::io::BufWriter::new(file)).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("MassField(b={}, depth={})", self.inner.base(), self.inner.depth())
    }
}

/// One seeded realization of the cascade.
#[pyclass(name = "Cascade", module = "mfcascade_py", frozen)]
struct PyCascade {
    inner: CascadeTree,
}

fn word(b: u32, digits: &[u32]) -> PyResult<Word> {
    Word::from_digits(b, digits).map_err(err)
}

#[pymethods]
impl PyCascade {
    #[new]
    fn new(model: &PyWeightModel, seed: u64) -> Self {
        PyCascade { inner: CascadeTree::new(model.inner.clone(), seed) }
    }

    fn node_weights(&self, digits: Vec<u32>) -> PyResult<Vec<f64>> {
        Ok(self.inner.node_weights(&word(self.inner.base(), &digits)?).to_vec())
    }

    #[pyo3(signature = (digits, tail_depth=0))]
    fn mass(&self, digits: Vec<u32>, tail_depth: u32) -> PyResult<f64> {
        self.inner.mass(&word(self.inner.base(), &digits)?, tail_depth).map_err(err)
    }

    #[pyo3(signature = (q, digits, tail_depth=0))]
    fn mass_q(&self, q: f64, digits: Vec<u32>, tail_depth: u32) -> PyResult<f64> {
        self.inner.mass_q(q, &word(self.inner.base(), &digits)?, tail_depth).map_err(err)
    }

    /// `T_d(w) = -Σ P(wu) ln P(wu)` over `|u| = d`.
    fn critical_mass(&self, digits: Vec<u32>, tail_depth: u32) -> PyResult<f64> {
        Ok(self.inner.critical_mass(&word(self.inner.base(), &digits)?, tail_depth).map_err(err)?.value)
    }

    #[pyo3(signature = (depth, q=None, tail_depth=0, critical=false))]
    fn field(&self, depth: u32, q: Option<f64>, tail_depth: u32, critical: bool) -> PyResult<PyMassField> {
        let mode = if critical { Construction::Critical } else { Construction::Nondegenerate };
        Ok(PyMassField { inner: self.inner.leaf_masses(depth, q, mode, tail_depth).map_err(err)? })
    }

    /// Digits of a point drawn from μ_q, to depth `n`.
    #[pyo3(signature = (q, n, tail_depth=4, key=0))]
    fn sample_point(&self, q: f64, n: u32, tail_depth: u32, key: u64) -> PyResult<Vec<u32>> {
        Ok(self.inner.tilted_point(q, n, tail_depth, key).map_err(err)?.digits())
    }
}

/// Runs an experiment from TOML text and returns the JSON summary.
#[pyfunction]
#[pyo3(signature = (config, out_dir, kind=None))]
fn run_experiment(config: &str, out_dir: PathBuf, kind: Option<&str>) -> PyResult<String> {
    let mut cfg = ExperimentConfig::from_text(config).map_err(err)?;
    if let Some(k) = kind {
        cfg.kind = Some(
            serde_json::from_value(serde_json::Value::String(k.into()))
                .map_err(|e| PyValueError::new_err(e.to_string()))?,
        );
    }
    let summary = experiment::run(&cfg, &out_dir).map_err(err)?;
    serde_json::to_string(&summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Static diagnostics of a TOML config as `(severity, message)` pairs.
#[pyfunction]
fn validate(config: &str) -> PyResult<Vec<(String, String)>> {
    let cfg = ExperimentConfig::from_text(config).map_err(err)?;
    Ok(experiment::validate(&cfg)
        .into_iter()
        .map(|d| (format!("{:?}", d.severity).to_lowercase(), d.message))
        .collect())
}

/// `τ*(α) = inf_q (αq - τ(q))` over sampled values.
#[pyfunction]
fn legendre(qs: Vec<f64>, taus: Vec<f64>, alpha: f64) -> PyResult<f64> {
    if qs.len() != taus.len() || qs.is_empty() {
        return Err(PyValueError::new_err("qs and taus must be non-empty and of equal length"));
    }
    Ok(analysis::legendre_on(&qs, &taus, alpha).value)
}

#[pymodule]
pub fn mfcascade_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWeightModel>()?;
    m.add_class::<PyMassField>()?;
    m.add_class::<PyCascade>()?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(legendre, m)?)?;
    Ok(())
}

//! Python bindings: synthetic data, missingness, diffusion schedules,
//! condition routing, FedAvg and whole experiment runs.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use fedcondi::autodiff::{ParamMap, Tensor};
use fedcondi::config::ExperimentConfig;
use fedcondi::data::{self, MaskMode, MissingnessConfig, MultimodalSample, SyntheticConfig};
use fedcondi::diffusion::DiffusionSchedule;
use fedcondi::embedding::{route_condition as route, CondEmbedding};
use fedcondi::eval;
use fedcondi::experiment;
use fedcondi::federation::{self, Upload};
use fedcondi::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::Shape { .. } | Error::Unsatisfiable(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

#[pyclass(name = "Sample", module = "pyfedcondi", skip_from_py_object)]
#[derive(Clone)]
struct PySample {
    inner: MultimodalSample,
}

#[pymethods]
impl PySample {
    #[getter]
    fn id(&self) -> u64 {
        self.inner.id
    }

    #[getter]
    fn label(&self) -> usize {
        self.inner.label
    }

    #[getter]
    fn present(&self) -> Vec<bool> {
        self.inner.present.clone()
    }

    /// Observed values per modality, as `[L_ts][L_f]` nested lists.
    #[getter]
    fn modalities(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.modalities.iter().map(rows).collect()
    }

    #[getter]
    fn masks(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.masks.iter().map(rows).collect()
    }

    fn missing_cells(&self) -> usize {
        self.inner.missing_cells()
    }

    fn __repr__(&self) -> String {
        format!(
            "Sample(id={}, label={}, modalities={}, missing_cells={})",
            self.inner.id,
            self.inner.label,
            self.inner.num_modalities(),
            self.inner.missing_cells()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (n, modalities=3, l_ts=24, l_f=1, classes=2, noise_sigma=0.1, class_offset=0.5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn generate_synthetic(
    n: usize,
    modalities: usize,
    l_ts: usize,
    l_f: usize,
    classes: usize,
    noise_sigma: f64,
    class_offset: f64,
    seed: u64,
) -> PyResult<Vec<PySample>> {
    let cfg = SyntheticConfig {
        n,
        modalities,
        l_ts,
        l_f,
        classes,
        noise_sigma,
        class_offset,
        seed,
    };
    let ds = data::generate_synthetic(&cfg).map_err(to_py)?;
    Ok(ds.into_iter().map(|inner| PySample { inner }).collect())
}

/// Masked copies of `samples`; the inputs are left untouched.
#[pyfunction]
#[pyo3(signature = (samples, p_s, p_w, seed=0, mode="cell"))]
fn apply_missingness(samples: Vec<PyRef<'_, PySample>>, p_s: f64, p_w: f64, seed: u64, mode: &str) -> PyResult<Vec<PySample>> {
    let mode = match mode {
        "cell" => MaskMode::Cell,
        "timestep" => MaskMode::Timestep,
        other => return Err(PyValueError::new_err(format!("mode must be 'cell' or 'timestep', got '{other}'"))),
    };
    let mut ds: Vec<MultimodalSample> = samples.iter().map(|s| s.inner.clone()).collect();
    data::apply_missingness(&mut ds, &MissingnessConfig { p_s, p_w, seed, mode }).map_err(to_py)?;
    Ok(ds.into_iter().map(|inner| PySample { inner }).collect())
}

#[pyclass(name = "DiffusionSchedule", module = "pyfedcondi")]
struct PySchedule {
    inner: DiffusionSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps=50, beta_min=1e-4, beta_max=0.5))]
    fn new(steps: usize, beta_min: f64, beta_max: f64) -> PyResult<Self> {
        Ok(PySchedule {
            inner: DiffusionSchedule::linear(steps, beta_min, beta_max).map_err(to_py)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.check(t)?;
        Ok(self.inner.beta(t))
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.check(t)?;
        Ok(self.inner.alpha_bar(t))
    }

    fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }
}

impl PySchedule {
    fn check(&self, t: usize) -> PyResult<()> {
        if t == 0 || t > self.inner.steps() {
            return Err(PyValueError::new_err(format!("t must be in 1..={}", self.inner.steps())));
        }
        Ok(())
    }
}

/// Condition vector for target modality `m` from a `[M][M][D]` table.
#[pyfunction]
fn route_condition(table: Vec<Vec<Vec<f64>>>, present: Vec<bool>, m: usize) -> PyResult<Vec<f64>> {
    let mm = table.len();
    let d = table.first().and_then(|r| r.first()).map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(mm * mm * d);
    for row in &table {
        if row.len() != mm || row.iter().any(|v| v.len() != d) {
            return Err(PyValueError::new_err("table must have shape [M][M][D]"));
        }
        row.iter().for_each(|v| flat.extend_from_slice(v));
    }
    let t = Tensor::new(vec![mm, mm, d], flat).map_err(to_py)?;
    let w = CondEmbedding::new(t).map_err(to_py)?;
    route(&w, &present, m).map_err(to_py)
}

#[pyfunction]
fn fedavg_weights(ns: Vec<usize>) -> PyResult<Vec<f64>> {
    if ns.is_empty() || ns.iter().sum::<usize>() == 0 {
        return Err(PyValueError::new_err("need at least one client with n > 0"));
    }
    Ok(federation::fedavg_weights(&ns))
}

/// Weighted average of `(client_id, {name: values}, n)` uploads.
#[pyfunction]
fn fedavg(uploads: Vec<(usize, std::collections::BTreeMap<String, Vec<f64>>, usize)>) -> PyResult<std::collections::BTreeMap<String, Vec<f64>>> {
    let ups: Vec<Upload> = uploads
        .into_iter()
        .map(|(client, tensors, n)| {
            let mut params = ParamMap::new();
            for (name, v) in tensors {
                params.insert(name, Tensor::vector(v));
            }
            Upload { client, params, n }
        })
        .collect();
    let out = federation::fedavg(&ups).map_err(to_py)?;
    Ok(out.iter().map(|(k, e)| (k.to_string(), e.value.data().to_vec())).collect())
}

/// Returns `(distance, degenerate)`.
#[pyfunction]
fn cosine_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, bool)> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    Ok(eval::cosine_distance(&a, &b))
}

#[pyfunction]
fn l2_distance(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    if a.len() != b.len() {
        return Err(PyValueError::new_err("vectors differ in length"));
    }
    Ok(eval::l2_distance(&a, &b))
}

#[pyclass(name = "ExperimentConfig", module = "pyfedcondi", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults, or the parsed TOML document when given.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(s) => ExperimentConfig::from_toml(s).map_err(to_py)?,
            None => ExperimentConfig::default(),
        };
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: ExperimentConfig::load(path).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }
}

/// Train and evaluate one configuration; returns `metrics.json` as a string.
#[pyfunction]
fn run_experiment(py: Python<'_>, config: PyRef<'_, PyConfig>, out: PathBuf) -> PyResult<String> {
    let cfg = config.inner.clone();
    cfg.validate().map_err(to_py)?;
    let summary = py.detach(|| experiment::run_experiment(&cfg, &out)).map_err(to_py)?;
    serde_json::to_string_pretty(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
fn pyfedcondi(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySample>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(apply_missingness, m)?)?;
    m.add_function(wrap_pyfunction!(route_condition, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg_weights, m)?)?;
    m.add_function(wrap_pyfunction!(fedavg, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_distance, m)?)?;
    m.add_function(wrap_pyfunction!(l2_distance, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

//! Python bindings: config, synthetic data, training, decoding and the
//! diagnostic exports. Datasets cross the boundary as JSON-lines strings;
//! records come back as Python dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use scga::config::Config;
use scga::data::{build_vocabulary, generate_splits, parse_dataset, to_jsonl};
use scga::export::{attention_record, sample_graph_record};
use scga::model::{DecodeStrategy, PreparedSample};
use scga::training::{evaluate, Trainer};
use scga::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Numeric(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_value<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn strategy(beam: Option<usize>) -> PyResult<DecodeStrategy> {
    match beam {
        None => Ok(DecodeStrategy::Greedy),
        Some(0) => Err(PyValueError::new_err("beam must be at least 1")),
        Some(b) => Ok(DecodeStrategy::Beam(b)),
    }
}

/// Hyperparameters; every key of the TOML config is settable.
#[pyclass(name = "Config", module = "scga_py")]
#[derive(Clone)]
struct PyConfig {
    inner: Config,
}

#[pymethods]
impl PyConfig {
    /// `Config(**overrides)`, e.g. `Config(d=32, epochs=5)`.
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, pyo3::types::PyDict>>) -> PyResult<Self> {
        let mut inner = Config::default();
        if let Some(kw) = overrides {
            let mut pairs = Vec::new();
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = if let Ok(b) = v.extract::<bool>() {
                    b.to_string()
                } else {
                    v.str()?.to_string()
                };
                let value = if v.is_instance_of::<pyo3::types::PyList>() {
                    value.replace('\'', "\"")
                } else {
                    value
                };
                pairs.push(format!("{key}={value}"));
            }
            inner.apply_overrides(&pairs).map_err(to_py)?;
        }
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: Config::from_toml(text).map_err(to_py)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Sets one key from its TOML spelling, e.g. `set("distances", "[1, 2]")`.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_value(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!("Config(d={}, K={}, seed={})", self.inner.d, self.inner.heads, self.inner.seed)
    }
}

/// Train and validation splits as JSON-lines strings.
#[pyfunction]
#[pyo3(signature = (config, seed=None))]
fn generate_data(config: &PyConfig, seed: Option<u64>) -> PyResult<(String, String)> {
    let cfg = &config.inner;
    let (train, val) = generate_splits(
        &cfg.world_spec(),
        cfg.train_samples,
        cfg.eval_samples,
        seed.unwrap_or(cfg.data_seed),
    )
    .map_err(to_py)?;
    Ok((to_jsonl(&train), to_jsonl(&val)))
}

/// Learning rate at `step` before `lr_scale`.
#[pyfunction]
fn lr_schedule(step: u64, d: usize, warmup: u64) -> PyResult<f64> {
    scga::training::lr_schedule(step, d, warmup).map_err(to_py)
}

/// Runs the finite-difference suite; one dict per check.
#[pyfunction]
#[pyo3(signature = (seeds=5))]
fn check_grads<'py>(py: Python<'py>, seeds: u64) -> PyResult<Vec<Bound<'py, PyAny>>> {
    let seeds: Vec<u64> = (1..=seeds).collect();
    let rows = scga::gradsuite::run(&seeds).map_err(to_py)?;
    rows.iter()
        .map(|r| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("name", &r.name)?;
            d.set_item("entries", r.entries)?;
            d.set_item("kinked", r.kinked)?;
            d.set_item("max_rel_error", r.max_rel_error)?;
            Ok(d.into_any())
        })
        .collect()
}

/// A model with its parameters and optimizer state.
#[pyclass(name = "Trainer", module = "scga_py", unsendable)]
struct PyTrainer {
    inner: Trainer,
}

impl PyTrainer {
    fn prepare(&self, jsonl: &str) -> PyResult<Vec<PreparedSample>> {
        let samples = parse_dataset(jsonl.as_bytes()).map_err(to_py)?;
        self.inner.model.prepare_all(&samples).map_err(to_py)
    }
}

#[pymethods]
impl PyTrainer {
    /// Fresh parameters; the vocabulary comes from `train_jsonl`.
    #[new]
    fn new(config: &PyConfig, train_jsonl: &str) -> PyResult<Self> {
        let samples = parse_dataset(train_jsonl.as_bytes()).map_err(to_py)?;
        let inner = Trainer::new(&config.inner, build_vocabulary(&samples)).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Trainer::load(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.state.step
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.inner.config().clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.inner.store.num_scalars()
    }

    /// Trains to the configured limits; returns per-epoch metrics.
    fn fit<'py>(&mut self, py: Python<'py>, train_jsonl: &str, val_jsonl: &str) -> PyResult<Bound<'py, PyAny>> {
        let train = self.prepare(train_jsonl)?;
        let val = self.prepare(val_jsonl)?;
        let history = self.inner.fit(&train, &val, None, |_| true).map_err(to_py)?;
        json_value(py, &history)
    }

    /// Teacher-forced loss and accuracies, plus exact match when `beam`
    /// is given (`beam=1` is greedy).
    #[pyo3(signature = (jsonl, beam=None))]
    fn evaluate<'py>(&self, py: Python<'py>, jsonl: &str, beam: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let samples = self.prepare(jsonl)?;
        let strategy = match beam {
            None => None,
            Some(1) => Some(DecodeStrategy::Greedy),
            b => Some(strategy(b)?),
        };
        let report = evaluate(&self.inner.model, &self.inner.store, &samples, strategy).map_err(to_py)?;
        json_value(py, &report)
    }

    /// Decoded answers, one record per sample.
    #[pyo3(signature = (jsonl, beam=None))]
    fn decode<'py>(&self, py: Python<'py>, jsonl: &str, beam: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
        let strategy = strategy(beam)?;
        let records = self
            .prepare(jsonl)?
            .iter()
            .map(|s| self.inner.model.decode_record(&self.inner.store, s, strategy))
            .collect::<scga::Result<Vec<_>>>()
            .map_err(to_py)?;
        json_value(py, &records)
    }

    /// Attention maps of every sample.
    fn attention<'py>(&self, py: Python<'py>, jsonl: &str) -> PyResult<Bound<'py, PyAny>> {
        let records = self
            .prepare(jsonl)?
            .iter()
            .map(|s| attention_record(&self.inner.model, &self.inner.store, s))
            .collect::<scga::Result<Vec<_>>>()
            .map_err(to_py)?;
        json_value(py, &records)
    }

    /// Video graphs and adjacencies of every sample.
    fn graphs<'py>(&self, py: Python<'py>, jsonl: &str) -> PyResult<Bound<'py, PyAny>> {
        let records: Vec<_> = self.prepare(jsonl)?.iter().map(sample_graph_record).collect();
        json_value(py, &records)
    }
}

#[pymodule]
fn scga_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(generate_data, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(check_grads, m)?)?;
    Ok(())
}

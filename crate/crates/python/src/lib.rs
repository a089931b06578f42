//! Python bindings. Structured results cross the boundary as JSON and come
//! back as plain dicts and lists.

use std::path::PathBuf;

use kuda_core::data::{
    classify_sample as classify, dominance_stats, load_jsonl, split_of, store_jsonl, synthesize,
    GeneratorConfig, LabelRange, SampleRecord, Split,
};
use kuda_core::fusion::{sentiment_ratio as ratio, Mode};
use kuda_core::gradcheck::{run_all, GradcheckConfig};
use kuda_core::metrics::compute_metrics as metrics;
use kuda_core::pipeline::{evaluate, metrics_json, run_two_stage, RunLog};
use kuda_core::snapshot::Snapshot;
use kuda_core::{Ablation, KudaError, KudaModel};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn err(e: KudaError) -> PyErr {
    if e.is_numerical() {
        PyArithmeticError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "valid" => Ok(Split::Valid),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("unknown split `{other}`"))),
    }
}

/// Training and model hyperparameters.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: kuda_core::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// Small CPU-sized model and schedule.
    #[staticmethod]
    fn desk() -> Self {
        Self {
            inner: kuda_core::TrainConfig::desk(),
        }
    }

    /// Full-size model and schedule.
    #[staticmethod]
    fn paper() -> Self {
        Self {
            inner: kuda_core::TrainConfig::paper(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: kuda_core::TrainConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("config serializes")
    }

    /// Copy with one ablation switched on, e.g. "no_KIP" or "no_DAF".
    fn with_ablation(&self, name: &str) -> PyResult<Self> {
        let a = Ablation::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| PyValueError::new_err(format!("unknown ablation `{name}`")))?;
        Ok(Self {
            inner: self.inner.clone().with_ablation(a),
        })
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
    fn k(&self) -> f64 {
        self.inner.k
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(seed={}, k={}, alpha={})",
            self.inner.seed, self.inner.k, self.inner.alpha
        )
    }
}

/// Samples with features and labels.
#[pyclass(name = "Dataset")]
struct PyDataset {
    records: Vec<SampleRecord>,
}

#[pymethods]
impl PyDataset {
    /// Synthetic data; `generator_json` overrides generator defaults.
    #[staticmethod]
    #[pyo3(signature = (n_samples, seed = 0, generator_json = None))]
    fn synthesize(n_samples: usize, seed: u64, generator_json: Option<&str>) -> PyResult<Self> {
        let mut cfg: GeneratorConfig = match generator_json {
            Some(text) => {
                serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?
            }
            None => GeneratorConfig::default(),
        };
        cfg.n_samples = n_samples;
        Ok(Self {
            records: synthesize(&cfg, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, bound = 1.0))]
    fn load(path: PathBuf, bound: f64) -> PyResult<Self> {
        let range = LabelRange::new(bound).map_err(err)?;
        Ok(Self {
            records: load_jsonl(path, range).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        store_jsonl(path, &self.records).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.records.len()
    }

    fn split_size(&self, split: &str) -> PyResult<usize> {
        Ok(split_of(&self.records, parse_split(split)?).len())
    }

    /// Labels `y` of one split, in file order.
    fn labels(&self, split: &str) -> PyResult<Vec<f64>> {
        Ok(split_of(&self.records, parse_split(split)?)
            .iter()
            .map(|r| r.y)
            .collect())
    }

    /// Dominant and noise modality counts and proportions.
    fn stats(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &dominance_stats(&self.records).map_err(err)?)
    }
}

/// A trained model.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    model: KudaModel,
    config: kuda_core::TrainConfig,
}

#[pymethods]
impl PyModel {
    /// Both training stages on the train/valid splits of `data`.
    #[staticmethod]
    fn train(data: &PyDataset, config: &PyTrainConfig) -> PyResult<Self> {
        let (model, _) = run_two_stage(&data.records, &config.inner, None, &mut RunLog::memory())
            .map_err(err)?;
        Ok(Self {
            model,
            config: config.inner.clone(),
        })
    }

    /// Loads parameters saved by `save` or by `kuda train`.
    #[staticmethod]
    fn load(path: PathBuf, config: &PyTrainConfig) -> PyResult<Self> {
        let mut model =
            KudaModel::new(&config.inner.effective_model(), config.inner.seed).map_err(err)?;
        model
            .store
            .load(&Snapshot::load(path).map_err(err)?)
            .map_err(err)?;
        Ok(Self {
            model,
            config: config.inner.clone(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.store.snapshot().save(path).map_err(err)
    }

    /// Fused predictions for one split, in file order. Labels are not read.
    #[pyo3(signature = (data, split = "test"))]
    fn predict(&self, data: &PyDataset, split: &str) -> PyResult<Vec<f64>> {
        let part = split_of(&data.records, parse_split(split)?);
        Ok(evaluate(&self.model, &part).map_err(err)?.prediction.y_hat)
    }

    /// Metric report for one split.
    #[pyo3(signature = (data, split = "test"))]
    fn evaluate(&self, py: Python<'_>, data: &PyDataset, split: &str) -> PyResult<Py<PyAny>> {
        let part = split_of(&data.records, parse_split(split)?);
        let report = evaluate(&self.model, &part).map_err(err)?.report;
        let text = metrics_json(&report, &self.config, split).map_err(err)?;
        Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
    }

    fn parameter_count(&self) -> usize {
        self.model.store.num_scalars()
    }
}

/// Train-mode sentiment ratios `[text, vision, audio]`.
#[pyfunction]
fn sentiment_ratio(y_hat: [f64; 3], y: f64, k: f64) -> PyResult<[f64; 3]> {
    Ok(ratio(y_hat, y, k, Mode::Train).map_err(err)?.r)
}

#[pyfunction]
#[pyo3(signature = (y_hat, y, bound = 1.0))]
fn compute_metrics(
    py: Python<'_>,
    y_hat: Vec<f64>,
    y: Vec<f64>,
    bound: f64,
) -> PyResult<Py<PyAny>> {
    let range = LabelRange::new(bound).map_err(err)?;
    to_py(py, &metrics(&y_hat, &y, range).map_err(err)?)
}

/// Dominant and noise flags for unimodal labels `[text, vision, audio]`.
#[pyfunction]
fn classify_sample(py: Python<'_>, labels: [f64; 3], y: f64) -> PyResult<Py<PyAny>> {
    let c = classify(labels, y);
    to_py(
        py,
        &serde_json::json!({"dominant": c.dominant, "noise": c.noise}),
    )
}

/// Finite-difference gradient check of every op and a small full model.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(py: Python<'_>, seed: u64) -> PyResult<Py<PyAny>> {
    to_py(
        py,
        &run_all(seed, &GradcheckConfig::default()).map_err(err)?,
    )
}

#[pymodule]
fn kuda(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(sentiment_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(classify_sample, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

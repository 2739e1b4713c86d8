//! Python bindings: run configuration, the CLI workflows, trained models,
//! datasets, and the fusion and metric primitives.

use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use serde::Serialize;

use mmrec::cli::{self, modelfile, RunConfig};
use mmrec::data::Dataset;
use mmrec::fusion::{self, ProjectedModalities};
use mmrec::metrics::{self, RankedList};
use mmrec::model::AblationVariant;
use mmrec::numerics::DenseVector;
use mmrec::pipeline::Recommendation;
use mmrec::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Lookup(_) => PyKeyError::new_err(e.to_string()),
        Error::Numerical(_) | Error::StaleCatalog { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn parse_variant(name: &str) -> PyResult<AblationVariant> {
    name.parse().map_err(py_err)
}

fn recommendations_to_py(py: Python<'_>, recs: &[Recommendation]) -> PyResult<Vec<Py<PyAny>>> {
    recs.iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("video_id", r.video_id)?;
            d.set_item("score", r.score)?;
            d.set_item("probability", r.probability)?;
            d.set_item("weights", r.weights.as_array().to_vec())?;
            Ok(d.into_any().unbind())
        })
        .collect()
}

/// Run configuration shared by every workflow.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (seed=0, out_dir=None, variant="FULL", max_epochs=None, n_users=None, n_videos=None))]
    fn new(
        seed: u64,
        out_dir: Option<PathBuf>,
        variant: &str,
        max_epochs: Option<usize>,
        n_users: Option<usize>,
        n_videos: Option<usize>,
    ) -> PyResult<Self> {
        let mut inner = RunConfig::default().with_seed(seed);
        inner.ablation_seeds = vec![seed];
        inner.variant = parse_variant(variant)?;
        if let Some(dir) = out_dir {
            inner.paths.rebase(&dir);
        }
        if let Some(e) = max_epochs {
            inner.train.max_epochs = e;
        }
        if let Some(n) = n_users {
            inner.world.n_users = n;
        }
        if let Some(n) = n_videos {
            inner.world.n_videos = n;
        }
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: RunConfig =
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant.name().to_string()
    }

    #[setter]
    fn set_variant(&mut self, name: &str) -> PyResult<()> {
        self.inner.variant = parse_variant(name)?;
        Ok(())
    }

    #[getter]
    fn model_path(&self) -> PathBuf {
        self.inner.paths.model.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, variant={}, out={})",
            self.inner.train.seed,
            self.inner.variant.name(),
            self.inner
                .paths
                .model
                .parent()
                .map_or(String::new(), |p| p.display().to_string())
        )
    }
}

/// Generates the synthetic world and writes the data files.
#[pyfunction]
fn gen_data(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    to_py(py, &cli::cmd_gen_data(&config.inner).map_err(py_err)?)
}

/// Trains `config.variant` and writes the model file; returns the history.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    to_py(py, &cli::cmd_train(&config.inner).map_err(py_err)?)
}

#[pyfunction]
fn evaluate(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    to_py(py, &cli::cmd_evaluate(&config.inner).map_err(py_err)?)
}

#[pyfunction]
fn ablate(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    to_py(py, &cli::cmd_ablate(&config.inner).map_err(py_err)?)
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(catalog: PathBuf, logs: PathBuf, profiles: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Dataset::load(&catalog, &logs, &profiles).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn from_config(config: &PyConfig) -> PyResult<Self> {
        let p = &config.inner.paths;
        Self::load(p.catalog.clone(), p.logs.clone(), p.profiles.clone())
    }

    fn user_ids(&self) -> Vec<u64> {
        self.inner.user_ids()
    }

    fn video_ids(&self) -> Vec<u64> {
        self.inner.catalog.iter().map(|v| v.video_id).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.logs.len()
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: mmrec::model::Model,
    seeds: modelfile::Seeds,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, header) = modelfile::load(&path).map_err(py_err)?;
        Ok(Self {
            inner,
            seeds: header.seeds,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        modelfile::save(&path, &self.inner, self.seeds).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().name().to_string()
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.config().d
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params().len()
    }

    fn config(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.config())
    }

    /// Top-`k` videos for `user` from `m` coarse candidates.
    #[pyo3(signature = (dataset, user, k=10, m=200))]
    fn recommend(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        user: u64,
        k: usize,
        m: usize,
    ) -> PyResult<Vec<Py<PyAny>>> {
        let recs = cli::recommend_for_user(&dataset.inner, &self.inner, user, k, m.max(k))
            .map_err(py_err)?;
        recommendations_to_py(py, &recs)
    }

    #[pyo3(signature = (dataset, user, k=10, m=200))]
    fn explain(
        &self,
        py: Python<'_>,
        dataset: &PyDataset,
        user: u64,
        k: usize,
        m: usize,
    ) -> PyResult<Py<PyAny>> {
        to_py(
            py,
            &cli::explain_user(&dataset.inner, &self.inner, user, k, m).map_err(py_err)?,
        )
    }
}

fn dense(values: Vec<f64>) -> PyResult<DenseVector> {
    DenseVector::new(values).map_err(py_err)
}

/// Modality weights `softmax(q . e_m)` over the present projected vectors;
/// pass None for an absent modality.
#[pyfunction]
fn attention_weights(query: Vec<f64>, projected: [Option<Vec<f64>>; 3]) -> PyResult<Vec<f64>> {
    let d = query.len();
    let present = [0, 1, 2].map(|m| projected[m].is_some());
    let [a, b, c] = projected.map(|v| v.unwrap_or_else(|| vec![0.0; d]));
    let proj = ProjectedModalities {
        vectors: [dense(a)?, dense(b)?, dense(c)?],
        present,
    };
    let w = fusion::attention_weights(&dense(query)?, &proj).map_err(py_err)?;
    Ok(w.as_array().to_vec())
}

fn ranked(ranking: Vec<u64>, relevant: Vec<u64>) -> PyResult<RankedList> {
    RankedList::new(ranking, relevant).map_err(py_err)
}

#[pyfunction]
fn precision_at_k(ranking: Vec<u64>, relevant: Vec<u64>, k: usize) -> PyResult<f64> {
    metrics::precision_at_k(&ranked(ranking, relevant)?, k).map_err(py_err)
}

#[pyfunction]
fn recall_at_k(ranking: Vec<u64>, relevant: Vec<u64>, k: usize) -> PyResult<f64> {
    metrics::recall_at_k(&ranked(ranking, relevant)?, k).map_err(py_err)
}

#[pyfunction]
fn ndcg_at_k(ranking: Vec<u64>, relevant: Vec<u64>, k: usize) -> PyResult<f64> {
    metrics::ndcg_at_k(&ranked(ranking, relevant)?, k).map_err(py_err)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    let scored: Vec<(f64, bool)> = scores.into_iter().zip(labels).collect();
    metrics::auc(&scored).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (probabilities, labels, threshold=0.5))]
fn f1(probabilities: Vec<f64>, labels: Vec<bool>, threshold: f64) -> PyResult<f64> {
    metrics::f1(&probabilities, &labels, threshold).map_err(py_err)
}

#[pymodule]
fn pymmrec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(attention_weights, m)?)?;
    m.add_function(wrap_pyfunction!(precision_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(f1, m)?)?;
    m.add("VARIANTS", AblationVariant::ALL.map(|v| v.name()).to_vec())?;
    Ok(())
}

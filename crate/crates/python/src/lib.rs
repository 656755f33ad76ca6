//! Python bindings. Matrices cross the boundary as lists of row lists.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use gclgcn::centrality::{composite_centrality, parse_measures};
use gclgcn::cluster::{kmeans as kmeans_rs, MetricRow};
use gclgcn::config::{parse_config, ExperimentConfig, SbmConfig};
use gclgcn::graph::Graph as RsGraph;
use gclgcn::harness;
use gclgcn::training::{self, Ablation};
use gclgcn::{Error, Matrix};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    let nrows = rows.len();
    Array2::from_shape_vec((nrows, ncols), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn metric_dict(m: &MetricRow) -> HashMap<&'static str, f64> {
    HashMap::from([
        ("acc", m.acc),
        ("nmi", m.nmi),
        ("ari", m.ari),
        ("f1", m.f1),
        ("composite", m.composite()),
    ])
}

/// Undirected attributed graph with optional ground-truth labels.
#[pyclass(name = "Graph", skip_from_py_object)]
#[derive(Clone)]
struct PyGraph {
    inner: RsGraph,
}

#[pymethods]
impl PyGraph {
    #[new]
    #[pyo3(signature = (features, edges, labels=None))]
    fn new(features: Vec<Vec<f64>>, edges: Vec<(usize, usize)>, labels: Option<Vec<usize>>) -> PyResult<Self> {
        let inner = RsGraph::new(to_matrix(features)?, edges, labels).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Planted-partition graph with separated Gaussian block means.
    #[staticmethod]
    #[pyo3(signature = (blocks, p_in=0.15, p_out=0.01, features=12, separation=3.0, seed=0))]
    fn sbm(blocks: Vec<usize>, p_in: f64, p_out: f64, features: usize, separation: f64, seed: u64) -> PyResult<Self> {
        let cfg = SbmConfig {
            blocks,
            p_in,
            p_out,
            features,
            separation,
            seed,
            ..SbmConfig::default()
        };
        let spec = cfg.spec().map_err(py_err)?;
        let inner = gclgcn::graph::generate_sbm(&spec, seed).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_nodes(&self) -> usize {
        self.inner.num_nodes()
    }

    #[getter]
    fn edges(&self) -> Vec<(usize, usize)> {
        self.inner.edges().to_vec()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.features())
    }

    #[getter]
    fn labels(&self) -> Option<Vec<usize>> {
        self.inner.labels().map(<[usize]>::to_vec)
    }

    fn __repr__(&self) -> String {
        format!(
            "Graph(nodes={}, edges={}, features={})",
            self.inner.num_nodes(),
            self.inner.edges().len(),
            self.inner.num_features()
        )
    }
}

/// Experiment configuration; keys follow the config-file format.
#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (preset=None))]
    fn new(preset: Option<&str>) -> PyResult<Self> {
        let inner = match preset {
            Some(name) => ExperimentConfig::preset(name).map_err(py_err)?,
            None => ExperimentConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: parse_config(&path).map_err(py_err)?,
        })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(py_err)
    }

    /// Checks ranges and fusion weights; the data source is not required here.
    fn validate(&self) -> PyResult<()> {
        self.inner.validate_model().map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.k
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[getter]
    fn fusion(&self) -> (f64, f64, f64) {
        (self.inner.lambda, self.inner.theta, self.inner.gamma)
    }
}

/// Outcome of one training run.
#[pyclass(name = "TrainResult", get_all)]
struct PyTrainResult {
    labels: Vec<usize>,
    q: Vec<Vec<f64>>,
    metrics: Option<HashMap<&'static str, f64>>,
    history_csv: String,
    losses: Vec<f64>,
}

#[pyfunction]
#[pyo3(signature = (graph, measures="degree,betweenness,closeness"))]
fn centrality(graph: &PyGraph, measures: &str) -> PyResult<Vec<Vec<f64>>> {
    let m = parse_measures(measures).map_err(py_err)?;
    let c = composite_centrality(&graph.inner, &m).map_err(py_err)?;
    Ok(to_rows(c.values()))
}

/// Returns `(labels, centroids, sse)`.
#[pyfunction]
#[pyo3(signature = (points, k, restarts=20, seed=0))]
fn kmeans(points: Vec<Vec<f64>>, k: usize, restarts: usize, seed: u64) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, f64)> {
    let r = kmeans_rs(&to_matrix(points)?, k, restarts, seed).map_err(py_err)?;
    Ok((r.labels, to_rows(&r.centroids), r.sse))
}

#[pyfunction]
fn evaluate(pred: Vec<usize>, truth: Vec<usize>) -> PyResult<HashMap<&'static str, f64>> {
    Ok(metric_dict(&MetricRow::evaluate(&pred, &truth).map_err(py_err)?))
}

#[pyfunction]
#[pyo3(signature = (z, centroids, t=1.0))]
fn soft_assign(z: Vec<Vec<f64>>, centroids: Vec<Vec<f64>>, t: f64) -> PyResult<Vec<Vec<f64>>> {
    let q = training::soft_assign_values(&to_matrix(z)?, &to_matrix(centroids)?, t).map_err(py_err)?;
    Ok(to_rows(&q))
}

#[pyfunction]
fn target_distribution(q: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&training::target_distribution(&to_matrix(q)?)))
}

/// Pretrains and runs the joint loop; releases the GIL while training.
#[pyfunction]
fn train(py: Python<'_>, graph: &PyGraph, config: &PyConfig) -> PyResult<PyTrainResult> {
    let (g, cfg) = (graph.inner.clone(), config.inner.clone());
    let out = py.detach(move || training::train(&g, &cfg)).map_err(py_err)?;
    Ok(PyTrainResult {
        labels: out.labels,
        q: to_rows(&out.q),
        metrics: out.metrics.as_ref().map(metric_dict),
        history_csv: out.history.to_csv(),
        losses: out.history.rows.iter().map(|r| r.loss.total).collect(),
    })
}

/// Four-row ablation table as CSV text.
#[pyfunction]
fn ablate(py: Python<'_>, graph: &PyGraph, config: &PyConfig) -> PyResult<String> {
    let (g, cfg) = (graph.inner.clone(), config.inner.clone());
    let table = py.detach(move || harness::ablation_study(&g, &cfg)).map_err(py_err)?;
    Ok(table.to_csv())
}

#[pyfunction]
fn ablation_variants() -> Vec<&'static str> {
    Ablation::ALL.iter().map(|a| a.key()).collect()
}

#[pymodule]
#[pyo3(name = "gclgcn")]
fn gclgcn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGraph>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(centrality, m)?)?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(soft_assign, m)?)?;
    m.add_function(wrap_pyfunction!(target_distribution, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_variants, m)?)?;
    Ok(())
}

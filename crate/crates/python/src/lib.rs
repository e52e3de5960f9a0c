//! Python bindings: `import abcboost`.

use abcboost_core::data::{load_dataset as load_raw, Format, LoadOptions};
use abcboost_core::{logit, BoostConfig, EnsembleModel, Error, IterationRecord, Method, RawDataset};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn flatten(rows: &[Vec<f64>]) -> PyResult<(Vec<f64>, usize)> {
    let width = rows.first().map_or(0, Vec::len);
    if let Some(i) = rows.iter().position(|r| r.len() != width) {
        return Err(PyValueError::new_err(format!(
            "row {i} has {} values, expected {width}",
            rows[i].len()
        )));
    }
    Ok((rows.concat(), width))
}

/// Labeled rows of raw feature values.
#[pyclass(module = "abcboost", frozen)]
struct Dataset {
    inner: RawDataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(rows: Vec<Vec<f64>>, labels: Vec<i64>) -> PyResult<Self> {
        if rows.len() != labels.len() {
            return Err(PyValueError::new_err(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let (features, width) = flatten(&rows)?;
        Ok(Dataset {
            inner: RawDataset::from_rows(features, width, labels).map_err(to_py)?,
        })
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    /// Distinct raw labels in ascending order.
    #[getter]
    fn classes(&self) -> Vec<i64> {
        self.inner.classes().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<i64> {
        self.inner.raw_labels().to_vec()
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.inner.n_samples()).map(|i| self.inner.row(i).to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n_samples()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_samples={}, n_features={}, num_classes={})",
            self.inner.n_samples(),
            self.inner.n_features(),
            self.inner.num_classes()
        )
    }
}

/// Read a CSV (label first) or LIBSVM file.
#[pyfunction]
#[pyo3(signature = (path, format=None, skip_header=false))]
fn load_dataset(path: &str, format: Option<&str>, skip_header: bool) -> PyResult<Dataset> {
    let format = match format {
        Some(f) => f.parse::<Format>().map_err(to_py)?,
        None => Format::from_path(path.as_ref()),
    };
    let options = LoadOptions {
        skip_header,
        allow_empty: false,
    };
    Ok(Dataset {
        inner: load_raw(path, format, options).map_err(to_py)?,
    })
}

/// A trained ensemble.
#[pyclass(module = "abcboost", frozen)]
struct Model {
    inner: EnsembleModel,
    history: Vec<IterationRecord>,
}

fn record_dict<'py>(py: Python<'py>, r: &IterationRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("iteration", r.iteration)?;
    d.set_item("train_loss", r.train_loss)?;
    d.set_item("test_errors", r.test_errors)?;
    d.set_item("base_class", r.base_class)?;
    d.set_item("candidates", r.candidates.clone())?;
    d.set_item("candidate_losses", r.candidate_losses.clone())?;
    d.set_item("class_losses", r.class_losses.clone())?;
    d.set_item("trees_trained", r.trees_trained)?;
    Ok(d)
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model {
            inner: EnsembleModel::load(path).map_err(to_py)?,
            history: Vec::new(),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Model {
            inner: EnsembleModel::from_json(text).map_err(to_py)?,
            history: Vec::new(),
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    #[getter]
    fn method(&self) -> &'static str {
        self.inner.method.name()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes
    }

    #[getter]
    fn classes(&self) -> Vec<i64> {
        self.inner.classes.clone()
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations_trained
    }

    #[getter]
    fn tree_count(&self) -> usize {
        self.inner.tree_count()
    }

    /// Base class id of every iteration; `None` for plain iterations.
    #[getter]
    fn base_classes(&self) -> Vec<Option<usize>> {
        self.inner.base_class_trace()
    }

    /// Per-iteration training records; empty for loaded models.
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.history.iter().map(|r| record_dict(py, r)).collect()
    }

    /// The model cut back to its first `m` iterations.
    fn truncated(&self, m: usize) -> Model {
        Model {
            inner: self.inner.truncated(m),
            history: self.history.iter().take(m).cloned().collect(),
        }
    }

    /// Class probabilities, one list of `K` values per row.
    fn predict_proba(&self, py: Python<'_>, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (features, width) = flatten(&rows)?;
        let k = self.inner.num_classes;
        let predictions = py
            .detach(|| self.inner.predict(&features, width))
            .map_err(to_py)?;
        Ok(predictions.probs.chunks_exact(k).map(<[f64]>::to_vec).collect())
    }

    /// Raw scores `F`, one list of `K` values per row.
    fn decision_function(&self, py: Python<'_>, rows: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let (features, width) = flatten(&rows)?;
        let k = self.inner.num_classes;
        let predictions = py
            .detach(|| self.inner.predict(&features, width))
            .map_err(to_py)?;
        Ok(predictions.scores.chunks_exact(k).map(<[f64]>::to_vec).collect())
    }

    /// Predicted raw labels.
    fn predict(&self, py: Python<'_>, rows: Vec<Vec<f64>>) -> PyResult<Vec<i64>> {
        let (features, width) = flatten(&rows)?;
        let predictions = py
            .detach(|| self.inner.predict(&features, width))
            .map_err(to_py)?;
        Ok(predictions.labels.iter().map(|&c| self.inner.classes[c]).collect())
    }

    /// `{"n_test", "misclassified", "error_rate", "log_loss", "confusion"}`.
    fn evaluate<'py>(&self, py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyDict>> {
        let report = py
            .detach(|| abcboost_core::evaluate(&self.inner, &data.inner))
            .map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("n_test", report.n_test)?;
        d.set_item("misclassified", report.misclassified)?;
        d.set_item("error_rate", report.error_rate)?;
        d.set_item("log_loss", report.log_loss)?;
        d.set_item("confusion", report.confusion)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(method={}, K={}, iterations={}, trees={})",
            self.inner.method,
            self.inner.num_classes,
            self.inner.iterations_trained,
            self.inner.tree_count()
        )
    }
}

/// Train a model. With `test`, every history record carries `test_errors`.
#[pyfunction]
#[pyo3(signature = (
    train, method="abcrobustlogit", J=20, nu=0.1, M=100, s=2, g=10, w=0,
    max_bins=abcboost_core::data::DEFAULT_MAX_BINS, min_leaf=1, test=None
))]
#[allow(non_snake_case, clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    train: &Dataset,
    method: &str,
    J: usize,
    nu: f64,
    M: usize,
    s: usize,
    g: usize,
    w: usize,
    max_bins: usize,
    min_leaf: usize,
    test: Option<&Dataset>,
) -> PyResult<Model> {
    let config = BoostConfig {
        method: method.parse::<Method>().map_err(to_py)?,
        max_leaves: J,
        shrinkage: nu,
        iterations: M,
        search_width: s,
        gap: g,
        warmup: w,
        max_bins,
        min_leaf,
    };
    let test = test.map(|t| &t.inner);
    let (inner, training) = py
        .detach(|| abcboost_core::fit(&config, &train.inner, test))
        .map_err(to_py)?;
    Ok(Model {
        inner,
        history: training.records,
    })
}

#[pyfunction]
fn softmax(scores: Vec<f64>) -> Vec<f64> {
    logit::softmax_probs(&scores)
}

/// First and second derivative of one sample's loss with respect to
/// `F[k]` when `base` absorbs the sum-to-zero constraint.
#[pyfunction]
fn abc_derivatives(probs: Vec<f64>, label: usize, k: usize, base: usize) -> PyResult<(f64, f64)> {
    if label >= probs.len() || k >= probs.len() || base >= probs.len() {
        return Err(PyValueError::new_err("class index out of range"));
    }
    logit::abc_derivs(&probs, label, k, base).map_err(to_py)
}

/// Determinant of the Hessian in the free coordinates for `base`.
#[pyfunction]
fn hessian_det(probs: Vec<f64>, base: usize) -> PyResult<f64> {
    if base >= probs.len() || probs.len() < 2 {
        return Err(PyValueError::new_err("base out of range"));
    }
    Ok(logit::hessian_det(&probs, base))
}

#[pymodule]
fn abcboost(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add("METHODS", Method::ALL.iter().map(|m| m.name()).collect::<Vec<_>>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(abc_derivatives, m)?)?;
    m.add_function(wrap_pyfunction!(hessian_det, m)?)?;
    Ok(())
}

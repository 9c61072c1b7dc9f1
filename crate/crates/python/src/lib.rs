//! Python module `crnn`: corpora, models, training and checks.

use std::path::PathBuf;

use ::crnn as core;
use core::cells::CellKind;
use core::corpus::{LabeledCorpus, SplitPlan};
use core::encoding::{Alphabet, CharMatrix};
use core::gradcheck::GradCheckOptions;
use core::metrics::MetricsReport;
use core::model::{CrnnConfig, CrnnParams};
use core::train::TrainPlan;
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: core::Error) -> PyErr {
    match e {
        core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn cell(name: &str) -> PyResult<CellKind> {
    name.parse().map_err(err)
}

/// Model hyper-parameters.
#[pyclass(name = "Config", module = "crnn", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: CrnnConfig,
}

#[pymethods]
impl PyConfig {
    /// Defaults to the full-size model with a GRU cell.
    #[new]
    #[pyo3(signature = (classes, *, filters=400, hidden=400, window=20, pool=2, length=500, alpha=0.7, cell="gru", seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        classes: usize,
        filters: usize,
        hidden: usize,
        window: usize,
        pool: usize,
        length: usize,
        alpha: f64,
        cell: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let inner = CrnnConfig {
            filters,
            hidden,
            window,
            pool,
            length,
            classes,
            alpha,
            cell: self::cell(cell)?,
            seed,
        };
        inner.validate().map_err(err)?;
        Ok(PyConfig { inner })
    }

    /// A few-thousand-parameter model for quick runs.
    #[staticmethod]
    #[pyo3(signature = (classes, cell="gru", seed=0))]
    fn small(classes: usize, cell: &str, seed: u64) -> PyResult<Self> {
        let inner = CrnnConfig {
            seed,
            ..CrnnConfig::small(classes, self::cell(cell)?)
        };
        inner.validate().map_err(err)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn from_kv(text: &str) -> PyResult<Self> {
        let inner = CrnnConfig::from_kv(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(PyConfig { inner })
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv()
    }

    #[getter]
    fn filters(&self) -> usize {
        self.inner.filters
    }
    #[getter]
    fn hidden(&self) -> usize {
        self.inner.hidden
    }
    #[getter]
    fn window(&self) -> usize {
        self.inner.window
    }
    #[getter]
    fn pool(&self) -> usize {
        self.inner.pool
    }
    #[getter]
    fn length(&self) -> usize {
        self.inner.length
    }
    #[getter]
    fn classes(&self) -> usize {
        self.inner.classes
    }
    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha
    }
    #[getter]
    fn cell(&self) -> String {
        self.inner.cell.to_string()
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!("Config({})", self.inner)
    }
}

/// Labelled texts with a stable label index.
#[pyclass(name = "Corpus", module = "crnn", from_py_object)]
#[derive(Clone)]
struct PyCorpus {
    inner: LabeledCorpus,
}

#[pymethods]
impl PyCorpus {
    /// From `(label, text)` pairs; class ids follow first appearance.
    #[new]
    #[pyo3(signature = (pairs, name="corpus"))]
    fn new(pairs: Vec<(String, String)>, name: &str) -> PyResult<Self> {
        let mut inner = LabeledCorpus::new(name);
        for (label, text) in pairs {
            inner.push(&label, text).map_err(err)?;
        }
        Ok(PyCorpus { inner })
    }

    #[staticmethod]
    fn load_tsv(path: PathBuf) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: core::corpus::load_tsv(path).map_err(err)?,
        })
    }

    fn save_tsv(&self, path: PathBuf) -> PyResult<()> {
        core::corpus::save_tsv(&self.inner, path).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (count, seed=0))]
    fn synthetic_motifs(count: usize, seed: u64) -> Self {
        PyCorpus {
            inner: core::corpus::synthetic_motifs(count, seed),
        }
    }

    #[staticmethod]
    #[pyo3(signature = (seed=0))]
    fn synthetic_news(seed: u64) -> Self {
        PyCorpus {
            inner: core::corpus::synthetic_news(seed),
        }
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn labels(&self) -> Vec<String> {
        self.inner.labels().to_vec()
    }

    #[getter]
    fn texts(&self) -> Vec<String> {
        self.inner.texts().to_vec()
    }

    #[getter]
    fn targets(&self) -> Vec<usize> {
        self.inner.targets().to_vec()
    }

    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Size, vocabulary, total words, mean sentence length and class count.
    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = core::corpus::stats(&self.inner).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("name", s.name)?;
        d.set_item("size", s.size)?;
        d.set_item("vocabulary", s.vocabulary)?;
        d.set_item("total_words", s.total_words)?;
        d.set_item("mst", s.mst)?;
        d.set_item("classes", s.classes)?;
        Ok(d)
    }

    /// Seeded shuffle into disjoint train and test parts sharing the label index.
    #[pyo3(signature = (train_count, test_count, seed=0))]
    fn split(&self, train_count: usize, test_count: usize, seed: u64) -> PyResult<(Self, Self)> {
        let plan = SplitPlan {
            train_count,
            test_count,
            batch_size: 1,
            seed,
        };
        let (a, b) = core::corpus::split(&self.inner, &plan).map_err(err)?;
        Ok((PyCorpus { inner: a }, PyCorpus { inner: b }))
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(name={:?}, records={}, classes={})",
            self.inner.name,
            self.inner.len(),
            self.inner.class_count()
        )
    }
}

fn metrics_dict<'py>(py: Python<'py>, report: &MetricsReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("precision", report.macro_precision)?;
    d.set_item("recall", report.macro_recall)?;
    d.set_item("f1", report.macro_f1)?;
    let per_class: Vec<Option<(f64, f64, f64)>> = report
        .per_class
        .iter()
        .map(|m| m.map(|m| (m.precision, m.recall, m.f1)))
        .collect();
    d.set_item("per_class", per_class)?;
    Ok(d)
}

/// A configuration with its parameters.
#[pyclass(name = "Model", module = "crnn")]
struct PyModel {
    config: CrnnConfig,
    params: CrnnParams,
}

impl PyModel {
    fn encode(&self, text: &str) -> PyResult<CharMatrix> {
        Alphabet::standard().encode(text, self.config.length).map_err(err)
    }

    fn encode_all(&self, texts: &[String]) -> PyResult<Vec<CharMatrix>> {
        texts.iter().map(|t| self.encode(t)).collect()
    }
}

#[pymethods]
impl PyModel {
    /// Freshly initialized from the config's seed.
    #[new]
    fn new(config: PyConfig) -> PyResult<Self> {
        let params = CrnnParams::init(&config.inner).map_err(err)?;
        Ok(PyModel {
            config: config.inner,
            params,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (config, params) = core::checkpoint::load(path).map_err(err)?;
        Ok(PyModel { config, params })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core::checkpoint::save(path, &self.config, &self.params).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig {
            inner: self.config.clone(),
        }
    }

    fn num_params(&self) -> usize {
        self.params.numel()
    }

    fn block_names(&self) -> Vec<String> {
        self.params.block_names()
    }

    fn logits(&self, text: &str) -> PyResult<Vec<f64>> {
        core::model::forward(&self.config, &self.params, &self.encode(text)?).map_err(err)
    }

    /// `(class id, probabilities)`.
    fn predict(&self, text: &str) -> PyResult<(usize, Vec<f64>)> {
        let p = core::model::predict(&self.config, &self.params, &self.encode(text)?).map_err(err)?;
        Ok((p.label, p.probs))
    }

    fn predict_many(&self, texts: Vec<String>) -> PyResult<Vec<usize>> {
        let inputs = self.encode_all(&texts)?;
        let preds = core::model::predict_many(&self.config, &self.params, &inputs, 64).map_err(err)?;
        Ok(preds.into_iter().map(|p| p.label).collect())
    }

    /// Mean cross-entropy over `(text, class id)` pairs.
    fn loss(&self, batch: Vec<(String, usize)>) -> PyResult<f64> {
        let pairs = batch
            .iter()
            .map(|(t, y)| Ok((self.encode(t)?, *y)))
            .collect::<PyResult<Vec<_>>>()?;
        core::model::loss(&self.config, &self.params, &pairs).map_err(err)
    }

    /// `(layer, shape)` for each stage of the forward pass.
    fn shape_trace(&self, text: &str) -> PyResult<Vec<(String, Vec<usize>)>> {
        let trace = core::model::shape_trace(&self.config, &self.params, &self.encode(text)?).map_err(err)?;
        Ok(trace.into_iter().map(|(n, s)| (n.to_string(), s)).collect())
    }

    /// Replaces the parameters with a trained set; returns the `(step, loss, test_f1)` trace.
    #[pyo3(signature = (train, test=None, *, steps=1000, batch_size=50, lr=0.01, clip=5.0, eval_every=0, micro_batch=0, seed=None))]
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &mut self,
        py: Python<'_>,
        train: &PyCorpus,
        test: Option<&PyCorpus>,
        steps: usize,
        batch_size: usize,
        lr: f64,
        clip: f64,
        eval_every: usize,
        micro_batch: usize,
        seed: Option<u64>,
    ) -> PyResult<Vec<(usize, f64, Option<f64>)>> {
        let plan = TrainPlan {
            steps,
            batch_size,
            seed: seed.unwrap_or(self.config.seed),
            eval_every,
            clip,
            lr,
            micro_batch,
        };
        let config = self.config.clone();
        let (train, test) = (train.inner.clone(), test.map(|t| t.inner.clone()));
        let outcome = py
            .detach(|| core::train::train(&config, &train, test.as_ref(), &plan))
            .map_err(err)?;
        self.params = outcome.params;
        Ok(outcome.trace.into_iter().map(|p| (p.step, p.loss, p.test_f1)).collect())
    }

    /// Macro precision, recall and F1 on a corpus.
    fn evaluate<'py>(&self, py: Python<'py>, corpus: &PyCorpus) -> PyResult<Bound<'py, PyDict>> {
        let report = core::train::evaluate(&self.config, &self.params, &corpus.inner).map_err(err)?;
        metrics_dict(py, &report)
    }

    /// Finite-difference check of every parameter block on one labelled batch.
    #[pyo3(signature = (texts, labels, tol=1e-4, max_per_block=40, seed=0))]
    fn gradcheck<'py>(
        &self,
        py: Python<'py>,
        texts: Vec<String>,
        labels: Vec<usize>,
        tol: f64,
        max_per_block: usize,
        seed: u64,
    ) -> PyResult<Bound<'py, PyDict>> {
        let inputs = self.encode_all(&texts)?;
        let opts = GradCheckOptions {
            tol,
            max_per_block: Some(max_per_block),
            seed,
            ..GradCheckOptions::default()
        };
        let report = core::gradcheck::check_model(&self.config, &self.params, &inputs, &labels, &opts).map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("passed", report.passed())?;
        d.set_item("max_rel_err", report.max_rel_err())?;
        d.set_item("checked", report.checked())?;
        d.set_item("skipped", report.skipped())?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!("Model({}, params={})", self.config, self.params.numel())
    }
}

/// Alphabet positions of the first `length` characters; `None` for characters outside it.
#[pyfunction]
#[pyo3(signature = (text, length=500))]
fn encode(text: &str, length: usize) -> PyResult<Vec<Option<u8>>> {
    Ok(Alphabet::standard().encode(text, length).map_err(err)?.indices().to_vec())
}

#[pyfunction]
fn alphabet() -> String {
    Alphabet::standard().symbols().iter().collect()
}

/// Trainable parameters of one recurrent cell with input size `d` and hidden size `h`.
#[pyfunction]
fn param_count(cell: &str, d: usize, h: usize) -> PyResult<usize> {
    Ok(core::cells::param_count(self::cell(cell)?, d, h))
}

/// `alpha * v + (1 - alpha) * h`.
#[pyfunction]
fn aggregate(v: Vec<f64>, h: Vec<f64>, alpha: f64) -> PyResult<Vec<f64>> {
    core::model::aggregate(&v, &h, alpha).map_err(err)
}

/// Macro-averaged precision, recall and F1 from class ids.
#[pyfunction]
fn macro_metrics<'py>(py: Python<'py>, classes: usize, targets: Vec<usize>, predicted: Vec<usize>) -> PyResult<Bound<'py, PyDict>> {
    let report = MetricsReport::from_predictions(classes, &targets, &predicted).map_err(err)?;
    metrics_dict(py, &report)
}

/// k-nearest-neighbour baseline over `bow` or `tfidf` vectors.
#[pyfunction]
#[pyo3(signature = (train, test, k=1, representation="bow"))]
fn knn<'py>(py: Python<'py>, train: &PyCorpus, test: &PyCorpus, k: usize, representation: &str) -> PyResult<Bound<'py, PyDict>> {
    let rep = representation.parse().map_err(err)?;
    let report = core::knn::knn_baseline(&train.inner, &test.inner, k, rep).map_err(err)?;
    metrics_dict(py, &report)
}

/// Per-step training time of each cell on the same batches, as dicts.
#[pyfunction]
#[pyo3(name = "bench", signature = (config, corpus, cells=None, steps=30, warmup=3, batch_size=16, seed=0))]
#[allow(clippy::too_many_arguments)]
fn bench_cells<'py>(
    py: Python<'py>,
    config: &PyConfig,
    corpus: &PyCorpus,
    cells: Option<Vec<String>>,
    steps: usize,
    warmup: usize,
    batch_size: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let kinds = match cells {
        Some(names) => names.iter().map(|n| cell(n)).collect::<PyResult<Vec<_>>>()?,
        None => CellKind::ALL.to_vec(),
    };
    let plan = core::bench::BenchPlan {
        steps,
        warmup,
        batch_size,
        seed,
    };
    let (config, corpus) = (config.inner.clone(), corpus.inner.clone());
    let results = py
        .detach(|| core::bench::bench_cells(&config, &corpus, &kinds, &plan))
        .map_err(err)?;
    results
        .into_iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("cell", r.cell.to_string())?;
            d.set_item("mean_ms", r.mean_ms)?;
            d.set_item("median_ms", r.median_ms)?;
            d.set_item("std_ms", r.std_ms)?;
            d.set_item("steps", r.steps)?;
            d.set_item("cell_params", r.cell_params)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
#[pyo3(name = "crnn")]
fn crnn_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(alphabet, m)?)?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(macro_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(bench_cells, m)?)?;
    m.add("ALPHABET_SIZE", core::encoding::ALPHABET_SIZE)?;
    Ok(())
}

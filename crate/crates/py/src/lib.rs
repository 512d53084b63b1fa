use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use vlp_core::downstream::{
    self, evaluate_caption, evaluate_classifier, evaluate_retrieval, finetune_caption, finetune_classifier, finetune_retrieval,
    ClassifyTask, RetrievalMode,
};
use vlp_core::numerics::{Tape, Tensor};
use vlp_core::objectives::Task;
use vlp_core::pipeline;
use vlp_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

/// Training configuration, parsed from TOML text.
#[pyclass(name = "TrainConfig", module = "vlp", from_py_object)]
#[derive(Clone)]
struct PyTrainConfig {
    inner: pipeline::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (text = ""))]
    fn new(text: &str) -> PyResult<Self> {
        let inner = pipeline::TrainConfig::from_str(text).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Load a config file; relative data paths resolve against its directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = pipeline::TrainConfig::load(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_text().map_err(py_err)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    #[getter]
    fn steps(&self) -> u64 {
        self.inner.steps
    }

    #[setter]
    fn set_steps(&mut self, v: u64) {
        self.inner.steps = v;
    }

    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.batch_size
    }

    #[getter]
    fn learning_rate(&self) -> f64 {
        self.inner.learning_rate
    }

    #[getter]
    fn temperature(&self) -> f64 {
        self.inner.temperature
    }

    #[getter]
    fn momentum(&self) -> f64 {
        self.inner.momentum
    }

    #[getter]
    fn data(&self) -> Option<PathBuf> {
        self.inner.data.clone()
    }

    #[setter]
    fn set_data(&mut self, v: Option<PathBuf>) {
        self.inner.data = v;
    }

    /// Names of the enabled pre-training loss terms.
    fn tasks(&self) -> Vec<&'static str> {
        Task::ALL.into_iter().filter(|t| self.inner.tasks.enabled(*t)).map(Task::name).collect()
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(seed={}, steps={}, tasks={:?})", self.inner.seed, self.inner.steps, self.tasks())
    }
}

/// A set of video-text records.
#[pyclass(name = "Dataset", module = "vlp", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: pipeline::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Generate a topic-structured corpus from a TOML spec (defaults when
    /// empty).
    #[staticmethod]
    #[pyo3(signature = (spec = ""))]
    fn synthetic(spec: &str) -> PyResult<Self> {
        let spec = pipeline::SyntheticSpec::from_str(spec).map_err(py_err)?;
        let inner = pipeline::generate_synthetic(&spec).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = pipeline::Dataset::load(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn frame_dim(&self) -> usize {
        self.inner.frame_dim
    }

    fn ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.id.clone()).collect()
    }

    /// Title token ids of record `i`.
    fn tokens(&self, i: usize) -> PyResult<Vec<usize>> {
        self.inner
            .records
            .get(i)
            .map(|r| r.tokens.clone())
            .ok_or_else(|| PyValueError::new_err(format!("record {i} out of range")))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// Model configuration and weights, optionally with the pre-training state.
#[pyclass(name = "Checkpoint", module = "vlp")]
struct PyCheckpoint {
    inner: pipeline::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = pipeline::Checkpoint::load(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.model.hidden
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    /// Flat values of one parameter.
    fn param(&self, name: &str) -> PyResult<Vec<f64>> {
        let t = self.inner.params.get(name).map_err(|e| py_err(e.into()))?;
        Ok(t.data().to_vec())
    }

    fn has_key_network(&self) -> bool {
        self.inner.key.is_some()
    }

    fn has_queues(&self) -> bool {
        self.inner.queues.is_some()
    }
}

fn loss_dict(r: &pipeline::StepReport) -> BTreeMap<String, f64> {
    let mut out: BTreeMap<String, f64> = r.losses.iter().map(|(t, v)| (t.name().to_string(), *v)).collect();
    out.insert("total".into(), r.total);
    out
}

/// Query network, key network, optimizer and queues of a pre-training run.
#[pyclass(name = "Pretrainer", module = "vlp")]
struct PyPretrainer {
    inner: pipeline::Pretrainer,
}

#[pymethods]
impl PyPretrainer {
    #[new]
    fn new(config: PyTrainConfig, data: &PyDataset) -> PyResult<Self> {
        let inner = pipeline::Pretrainer::new(config.inner, &data.inner).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Run one optimizer step; returns every loss term and `total`.
    fn train_step(&mut self) -> PyResult<BTreeMap<String, f64>> {
        let r = self.inner.train_step().map_err(py_err)?;
        Ok(loss_dict(&r))
    }

    /// Train to completion, writing `out/metrics.tsv` and checkpoints;
    /// returns the total loss of every step.
    fn run(&mut self, out: PathBuf) -> PyResult<Vec<f64>> {
        let summary = self.inner.run(&out).map_err(py_err)?;
        Ok(summary.reports.iter().map(|r| r.total).collect())
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    /// Entries in the (text, visual, frame) queues.
    fn queue_lengths(&self) -> (usize, usize, usize) {
        let q = &self.inner.queues;
        (q.text.len(), q.visual.len(), q.frames.len())
    }

    fn checkpoint(&self) -> PyCheckpoint {
        PyCheckpoint {
            inner: self.inner.checkpoint(),
        }
    }
}

fn retrieval_mode(task: &str) -> Option<RetrievalMode> {
    match task {
        "retrieval-text" => Some(RetrievalMode::Text),
        "retrieval-image" => Some(RetrievalMode::Image),
        _ => None,
    }
}

fn classify_task(task: &str) -> Option<ClassifyTask> {
    match task {
        "plot" => Some(ClassifyTask::Plot),
        "product-dual" => Some(ClassifyTask::ProductDual),
        _ => None,
    }
}

fn unknown_task(task: &str) -> PyErr {
    PyValueError::new_err(format!(
        "unknown task `{task}` (expected retrieval-text, retrieval-image, plot, product-dual or caption)"
    ))
}

/// Fine-tune the checkpoint's query network in place on a downstream task;
/// returns the loss of every step.
#[pyfunction]
#[pyo3(signature = (task, ckpt, data, config, seed = 0))]
fn finetune(task: &str, ckpt: &mut PyCheckpoint, data: &PyDataset, config: &PyTrainConfig, seed: u64) -> PyResult<Vec<f64>> {
    let cfg = ckpt.inner.model.clone();
    let params = &mut ckpt.inner.params;
    let ft = &config.inner.finetune;
    let losses = if let Some(mode) = retrieval_mode(task) {
        finetune_retrieval(&cfg, params, &data.inner, mode, ft, seed)
    } else if let Some(t) = classify_task(task) {
        finetune_classifier(&cfg, params, &data.inner, t, ft, seed)
    } else if task == "caption" {
        finetune_caption(&cfg, params, &data.inner, ft, seed)
    } else {
        return Err(unknown_task(task));
    };
    losses.map_err(py_err)
}

/// Downstream metrics of a checkpoint: `recall@k` for retrieval,
/// `accuracy_<head>` for classification, BLEU/ROUGE-L for captioning.
#[pyfunction]
#[pyo3(signature = (task, ckpt, data, config, seed = 0))]
fn evaluate(task: &str, ckpt: &PyCheckpoint, data: &PyDataset, config: &PyTrainConfig, seed: u64) -> PyResult<BTreeMap<String, f64>> {
    let cfg = &ckpt.inner.model;
    let params = &ckpt.inner.params;
    let ft = &config.inner.finetune;
    let mut out = BTreeMap::new();
    if let Some(mode) = retrieval_mode(task) {
        let r = evaluate_retrieval(cfg, params, &data.inner, mode, ft.negatives, seed).map_err(py_err)?;
        out.insert("candidates".into(), r.candidates as f64);
        out.extend(r.recall.iter().map(|(k, v)| (format!("recall@{k}"), *v)));
    } else if let Some(t) = classify_task(task) {
        let acc = evaluate_classifier(cfg, params, &data.inner, t, ft).map_err(py_err)?;
        out.extend(acc.into_iter().map(|(head, a)| (format!("accuracy_{}", head.trim_start_matches("ft.")), a)));
    } else if task == "caption" {
        let r = evaluate_caption(cfg, params, &data.inner, ft.beam, ft.max_caption_len).map_err(py_err)?;
        out.insert("bleu1".into(), r.metrics.bleu1);
        out.insert("bleu4".into(), r.metrics.bleu4);
        out.insert("rouge_l".into(), r.metrics.rouge_l);
    } else {
        return Err(unknown_task(task));
    }
    Ok(out)
}

/// `(id, [CLS] embedding)` for every record, in order.
#[pyfunction]
fn export_embeddings(ckpt: &PyCheckpoint, data: &PyDataset) -> PyResult<Vec<(String, Vec<f64>)>> {
    downstream::export_embeddings(&ckpt.inner.model, &ckpt.inner.params, &data.inner).map_err(py_err)
}

/// InfoNCE of one query against its positive and a set of negatives.
#[pyfunction]
fn info_nce(query: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let to_py = |e: vlp_core::NumericsError| py_err(e.into());
    let d = query.len();
    let negatives = Tensor::from_rows(&negatives).map_err(to_py)?;
    let positive = Tensor::new(vec![1, positive.len()], positive).map_err(to_py)?;
    let mut tape = Tape::no_grad();
    let q = tape.constant(Tensor::new(vec![1, d], query).map_err(to_py)?);
    let loss = vlp_core::objectives::info_nce(&mut tape, q, &positive, &negatives, tau).map_err(py_err)?;
    Ok(tape.value(loss).item())
}

/// Corpus-level BLEU-`max_n` over token-id sequences.
#[pyfunction]
#[pyo3(signature = (hyps, refs, max_n = 4))]
fn corpus_bleu(hyps: Vec<Vec<usize>>, refs: Vec<Vec<usize>>, max_n: usize) -> PyResult<f64> {
    downstream::corpus_bleu(&hyps, &refs, max_n).map_err(py_err)
}

/// Sentence-level ROUGE-L F-measure.
#[pyfunction]
fn rouge_l(hyp: Vec<usize>, reference: Vec<usize>) -> f64 {
    downstream::rouge_l(&hyp, &reference)
}

/// Fraction of 1-based ranks that are at most `k`.
#[pyfunction]
fn recall_at_k(ranks: Vec<usize>, k: usize) -> PyResult<f64> {
    downstream::recall_at_k(&ranks, k).map_err(py_err)
}

#[pymodule]
fn vlp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyPretrainer>()?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(export_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(info_nce, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(rouge_l, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    Ok(())
}

//! Python bindings: dataset generation and annotation, metrics, flow I/O,
//! models, training, evaluation and the command line.
//!
//! Structured results (reports, summaries, dataset indices) cross the
//! boundary as JSON and come back as plain dicts and lists.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use serde::Serialize;

use modkit::annotator::{annotate_dataset as annotate_dir, AnnotatorConfig};
use modkit::evalkit;
use modkit::flowio::{self, FlowField, Mask};
use modkit::model::{full_gradcheck_suite, ModelConfig, JOINT_CHECK_SEEDS};
use modkit::scenegen::{generate_dataset as generate_dir, DatasetSpec};
use modkit::trainer::{self, Dataset, EvalOptions, LabelSource, TrainConfig};
use modkit::{BBox, Detection};

fn py_err(e: modkit::Error) -> PyErr {
    if e.is_io() {
        PyIOError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn bbox(t: (f64, f64, f64, f64)) -> BBox {
    BBox::new(t.0, t.1, t.2, t.3)
}

/// A detection and/or segmentation network.
#[pyclass(module = "modkit_py")]
pub struct Model {
    inner: modkit::model::Model,
}

#[pymethods]
impl Model {
    /// Fresh network from `key = value` config text (defaults when empty).
    #[new]
    #[pyo3(signature = (config = "", seed = 0))]
    fn new(config: &str, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::from_kv(config).map_err(py_err)?;
        let inner = modkit::model::Model::build(cfg, seed).map_err(py_err)?;
        Ok(Model { inner })
    }

    /// Reads a MODW checkpoint; training checkpoints are accepted too.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = modkit::model::Model::load(&path).map_err(py_err)?;
        Ok(Model { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    #[getter]
    fn config(&self) -> String {
        self.inner.config.to_kv()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.params.iter().map(|p| p.name.clone()).collect()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(seg_head={}, det_head={}, motion_stream={}, params={})",
            c.seg_head,
            c.det_head,
            c.motion_stream,
            self.inner.num_params()
        )
    }
}

fn eval_options(min_conf: f64) -> EvalOptions {
    EvalOptions {
        min_conf,
        ..EvalOptions::default()
    }
}

fn load_split(models: &[&modkit::model::Model], data: &Path, split: &str, labels: &str) -> PyResult<Dataset> {
    let labels: LabelSource = labels.parse().map_err(py_err)?;
    let cfg = models
        .iter()
        .find(|m| m.config.seg_head && m.config.motion_stream)
        .unwrap_or(&models[0])
        .config
        .clone();
    Dataset::load(data, split, labels, &cfg).map_err(py_err)
}

fn model_refs<'a>(models: &'a [PyRef<'a, Model>]) -> PyResult<Vec<&'a modkit::model::Model>> {
    if models.is_empty() {
        return Err(PyValueError::new_err("at least one model is needed"));
    }
    Ok(models.iter().map(|m| &m.inner).collect())
}

/// Metrics report of `models` on a split of a generated dataset.
#[pyfunction]
#[pyo3(signature = (models, data, split = "val", labels = "generated", min_conf = 0.1))]
fn evaluate<'py>(
    py: Python<'py>,
    models: Vec<PyRef<'py, Model>>,
    data: PathBuf,
    split: &str,
    labels: &str,
    min_conf: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let refs = model_refs(&models)?;
    let ds = load_split(&refs, &data, split, labels)?;
    let report = trainer::evaluate(&refs, &ds, &eval_options(min_conf)).map_err(py_err)?;
    to_py(py, &report)
}

/// Per-frame predictions: `{"frame", "mask" (bytes or None), "width",
/// "height", "detections"}`.
#[pyfunction]
#[pyo3(signature = (models, data, split = "val", min_conf = 0.1))]
fn predict<'py>(
    py: Python<'py>,
    models: Vec<PyRef<'py, Model>>,
    data: PathBuf,
    split: &str,
    min_conf: f64,
) -> PyResult<Vec<Bound<'py, PyAny>>> {
    let refs = model_refs(&models)?;
    let ds = load_split(&refs, &data, split, "generated")?;
    let preds = trainer::predict_frames(&refs, &ds, &eval_options(min_conf)).map_err(py_err)?;
    preds
        .iter()
        .map(|p| {
            let d = pyo3::types::PyDict::new(py);
            d.set_item("frame", p.frame)?;
            d.set_item("width", ds.width)?;
            d.set_item("height", ds.height)?;
            d.set_item("mask", p.mask.as_ref().map(|m| PyBytes::new(py, &m.data)))?;
            d.set_item("detections", to_py(py, &p.detections)?)?;
            Ok(d.into_any())
        })
        .collect()
}

/// Trains the model(s) of a config given as `key = value` text. Returns the
/// trained models and a per-model summary (loss history, evaluations).
#[pyfunction]
#[pyo3(signature = (config, base_dir = None))]
fn train<'py>(py: Python<'py>, config: &str, base_dir: Option<PathBuf>) -> PyResult<(Vec<Model>, Bound<'py, PyAny>)> {
    let cfg = TrainConfig::from_kv(config, base_dir.as_deref()).map_err(py_err)?;
    let outcome = py.detach(|| trainer::train(&cfg)).map_err(py_err)?;
    let runs: Vec<_> = outcome
        .runs
        .iter()
        .map(|r| {
            serde_json::json!({
                "history": r.history.iter().map(|h| serde_json::json!({
                    "step": h.step, "epoch": h.epoch, "task": h.task.as_str(),
                    "loss": h.loss, "smoothed": h.smoothed,
                })).collect::<Vec<_>>(),
                "epoch_smoothed": r.epoch_smoothed,
                "evals": r.evals,
            })
        })
        .collect();
    let models = outcome.models.into_iter().map(|inner| Model { inner }).collect();
    Ok((models, to_py(py, &runs)?))
}

/// Renders a synthetic dataset into `out`; returns its index.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, frames = 250, seq_len = 10, n_objects = 6, val_fraction = 0.2))]
fn generate_dataset<'py>(
    py: Python<'py>,
    out: PathBuf,
    seed: u64,
    frames: usize,
    seq_len: usize,
    n_objects: usize,
    val_fraction: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = DatasetSpec {
        seed,
        frames,
        seq_len,
        n_objects,
        val_fraction,
        ..DatasetSpec::default()
    };
    let index = py.detach(|| generate_dir(&spec, &out)).map_err(py_err)?;
    to_py(py, &index)
}

/// Labels a generated dataset from tracks and odometry; returns the summary.
#[pyfunction]
#[pyo3(signature = (data, speed_thresh = 1.0, window = 3, iou_min = 0.5))]
fn annotate_dataset<'py>(
    py: Python<'py>,
    data: PathBuf,
    speed_thresh: f64,
    window: usize,
    iou_min: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = AnnotatorConfig {
        iou_min,
        speed_thresh,
        window,
    };
    let summary = annotate_dir(&data, &cfg).map_err(py_err)?;
    to_py(py, &summary)
}

/// IoU of two `(cx, cy, w, h)` boxes.
#[pyfunction]
fn iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    evalkit::iou(&bbox(a), &bbox(b))
}

/// All-point interpolated AP of `(confidence, is_true_positive)` pairs.
#[pyfunction]
fn average_precision(scored: Vec<(f64, bool)>, npos: usize) -> f64 {
    evalkit::average_precision(&scored, npos)
}

/// Greedy matching of `(cx, cy, w, h, confidence)` detections to
/// `(cx, cy, w, h)` ground truth.
#[pyfunction]
#[pyo3(signature = (detections, ground_truth, iou_min = 0.5))]
fn match_detections(
    detections: Vec<(f64, f64, f64, f64, f64)>,
    ground_truth: Vec<(f64, f64, f64, f64)>,
    iou_min: f64,
) -> Vec<Option<usize>> {
    let dets: Vec<Detection> = detections
        .into_iter()
        .enumerate()
        .map(|(i, d)| Detection {
            bbox: BBox::new(d.0, d.1, d.2, d.3),
            confidence: d.4,
            motion_class: None,
            cell: i,
        })
        .collect();
    let gts: Vec<BBox> = ground_truth.into_iter().map(bbox).collect();
    evalkit::match_detections(&dets, &gts, iou_min)
}

/// Pixel metrics (percent) of two row-major 0/1 masks.
#[pyfunction]
fn pixel_metrics<'py>(
    py: Python<'py>,
    pred: Vec<u8>,
    gt: Vec<u8>,
    width: usize,
    height: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let p = Mask::new(width, height, pred).map_err(py_err)?;
    let g = Mask::new(width, height, gt).map_err(py_err)?;
    to_py(py, &evalkit::pixel_metrics(&p, &g).map_err(py_err)?)
}

/// Reads a `.flo` file as `(width, height, [u0, v0, u1, v1, ...])`.
#[pyfunction]
fn read_flo(path: PathBuf) -> PyResult<(usize, usize, Vec<f32>)> {
    let f = flowio::read_flo(&path).map_err(py_err)?;
    Ok((f.width, f.height, f.data))
}

#[pyfunction]
fn write_flo(path: PathBuf, width: usize, height: usize, data: Vec<f32>) -> PyResult<()> {
    let f = FlowField::new(width, height, data).map_err(py_err)?;
    flowio::write_flo(&path, &f).map_err(py_err)
}

/// Color-coded flow as packed RGB bytes.
#[pyfunction]
#[pyo3(signature = (width, height, data, max_magnitude = None))]
fn flow_to_rgb<'py>(
    py: Python<'py>,
    width: usize,
    height: usize,
    data: Vec<f32>,
    max_magnitude: Option<f32>,
) -> PyResult<Bound<'py, PyBytes>> {
    let f = FlowField::new(width, height, data).map_err(py_err)?;
    let img = flowio::flow_to_rgb(&f, max_magnitude).map_err(py_err)?;
    Ok(PyBytes::new(py, &img.data))
}

#[pyfunction]
fn color_wheel() -> Vec<(u8, u8, u8)> {
    flowio::color_wheel().into_iter().map(|c| (c[0], c[1], c[2])).collect()
}

/// Finite-difference check of every op and the joint graph:
/// `[(name, max_relative_error), ...]`.
#[pyfunction]
#[pyo3(signature = (instances = 10))]
fn gradcheck(py: Python<'_>, instances: usize) -> PyResult<Vec<(String, f64)>> {
    let results = py
        .detach(|| full_gradcheck_suite(instances, &JOINT_CHECK_SEEDS))
        .map_err(py_err)?;
    Ok(results.into_iter().map(|(n, r)| (n, r.max_rel_error)).collect())
}

/// Runs the `modkit` command line with `args` and returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("modkit".to_string()).chain(args).collect();
    py.detach(|| modkit::cli::run_from(argv))
}

#[pymodule]
fn modkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(annotate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(match_detections, m)?)?;
    m.add_function(wrap_pyfunction!(pixel_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(read_flo, m)?)?;
    m.add_function(wrap_pyfunction!(write_flo, m)?)?;
    m.add_function(wrap_pyfunction!(flow_to_rgb, m)?)?;
    m.add_function(wrap_pyfunction!(color_wheel, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

//! Python bindings: geometry, configs, training, evaluation and the gradient
//! check suite.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use scrl_core::augment::{generate_image, SceneConfig};
use scrl_core::eval::{eval_checkpoint, EvalConfig, Protocol};
use scrl_core::geometry::{self, IntersectionRegion};
use scrl_core::rng::seeded;
use scrl_core::tensor::serialize::Checkpoint;
use scrl_core::trainer::{self, StepMetrics};
use scrl_core::{gradsuite, Error};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::NonFinite(_) => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Axis-aligned box `(x, y, w, h)` in pixels.
#[pyclass(name = "Box", skip_from_py_object)]
#[derive(Clone, Copy)]
pub struct PyBox {
    inner: geometry::Box,
}

#[pymethods]
impl PyBox {
    #[new]
    fn new(x: f64, y: f64, w: f64, h: f64) -> PyResult<Self> {
        Ok(PyBox {
            inner: geometry::Box::new(x, y, w, h).map_err(to_py)?,
        })
    }

    #[getter]
    fn x(&self) -> f64 {
        self.inner.x
    }

    #[getter]
    fn y(&self) -> f64 {
        self.inner.y
    }

    #[getter]
    fn w(&self) -> f64 {
        self.inner.w
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.h
    }

    fn area(&self) -> f64 {
        self.inner.area()
    }

    fn iou(&self, other: &PyBox) -> f64 {
        geometry::iou(&self.inner, &other.inner)
    }

    fn as_tuple(&self) -> (f64, f64, f64, f64) {
        (self.inner.x, self.inner.y, self.inner.w, self.inner.h)
    }

    fn __repr__(&self) -> String {
        format!(
            "Box(x={}, y={}, w={}, h={})",
            self.inner.x, self.inner.y, self.inner.w, self.inner.h
        )
    }
}

/// Samples up to `k` boxes inside `region` with pairwise IoU at most `iou_thr`
/// (no filter when `None`). Returns the boxes and whether the attempt budget
/// ran out first.
#[pyfunction]
#[pyo3(signature = (region, k, min_side, seed, iou_thr = Some(0.5), max_attempts = 100_000))]
fn sample_rois(
    region: &PyBox,
    k: usize,
    min_side: f64,
    seed: u64,
    iou_thr: Option<f64>,
    max_attempts: usize,
) -> PyResult<(Vec<PyBox>, bool)> {
    let is = IntersectionRegion { rect: region.inner };
    let s = geometry::sample_rois(&is, k, iou_thr, min_side, min_side, max_attempts, &mut seeded(seed))
        .map_err(to_py)?;
    Ok((s.boxes.into_iter().map(|inner| PyBox { inner }).collect(), s.truncated))
}

/// Flat `key = value` training configuration.
#[pyclass(name = "TrainConfig", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTrainConfig {
    inner: trainer::TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    /// Defaults, optionally overridden by config-file text.
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => trainer::TrainConfig::parse(t).map_err(to_py)?,
            None => trainer::TrainConfig::default(),
        };
        Ok(PyTrainConfig { inner })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.to_string())
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key {key:?}")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn total_steps(&self) -> usize {
        self.inner.total_steps()
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        trainer::config::KEYS.to_vec()
    }
}

fn metrics_dict(m: &StepMetrics) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("step", m.step as f64),
        ("epoch", m.epoch as f64),
        ("loss", m.loss),
        ("loss_12", m.loss_12),
        ("loss_21", m.loss_21),
        ("lr", m.lr),
        ("tau", m.tau),
        ("boxes_per_image", m.boxes_per_image),
        ("truncated", m.truncated as f64),
        ("skipped", m.skipped as f64),
        ("grad_norm", m.grad_norm),
        ("embedding_std", m.embedding_std),
    ])
}

/// Online/target pair with its optimizer and synthetic dataset.
#[pyclass(name = "Trainer")]
pub struct PyTrainer {
    inner: trainer::Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyTrainConfig) -> PyResult<Self> {
        Ok(PyTrainer {
            inner: trainer::Trainer::new(config.inner.clone()).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn from_checkpoint(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(to_py)?;
        Ok(PyTrainer {
            inner: trainer::Trainer::from_checkpoint(&ck).map_err(to_py)?,
        })
    }

    /// Index of the next step.
    #[getter]
    fn step_index(&self) -> usize {
        self.inner.step
    }

    fn total_steps(&self) -> usize {
        self.inner.total_steps()
    }

    /// Runs one step and returns its metrics.
    fn step(&mut self) -> PyResult<BTreeMap<&'static str, f64>> {
        Ok(metrics_dict(&self.inner.train_step().map_err(to_py)?))
    }

    /// Trains into `out` (metrics, manifest, checkpoints) for at most
    /// `max_steps` steps; returns the number of completed steps.
    #[pyo3(signature = (out, max_steps = None))]
    fn run(&mut self, out: PathBuf, max_steps: Option<usize>) -> PyResult<usize> {
        let s = self
            .inner
            .run(&out, &AtomicBool::new(false), max_steps)
            .map_err(to_py)?;
        Ok(s.steps)
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.inner.checkpoint().save(&path).map_err(to_py)
    }

    fn online_hash(&self) -> u64 {
        self.inner.pair.online.params.content_hash()
    }

    fn target_hash(&self) -> u64 {
        self.inner.pair.target.params.content_hash()
    }
}

/// Frozen-backbone linear probe of a checkpoint; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (path, protocol = "roi", seed = 0, epochs = None))]
fn evaluate(path: PathBuf, protocol: &str, seed: u64, epochs: Option<usize>) -> PyResult<String> {
    let protocol: Protocol = protocol.parse().map_err(to_py)?;
    let mut cfg = EvalConfig {
        seed,
        ..EvalConfig::default()
    };
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let r = eval_checkpoint(&path, protocol, &cfg).map_err(to_py)?;
    serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Gradient check suite: `(name, max relative error, coordinates checked)`.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64, usize)>> {
    Ok(gradsuite::run_suite(seed)
        .map_err(to_py)?
        .into_iter()
        .map(|c| (c.name, c.max_rel_error, c.checked))
        .collect())
}

/// One synthetic scene: CHW pixels (flat), their shape, and
/// `(x, y, w, h, class_id)` ground truth.
#[pyfunction]
#[pyo3(signature = (seed, size = 64))]
#[allow(clippy::type_complexity)]
fn synthetic_image(seed: u64, size: usize) -> PyResult<(Vec<f64>, Vec<usize>, Vec<(f64, f64, f64, f64, usize)>)> {
    let scene = SceneConfig {
        width: size,
        height: size,
        ..SceneConfig::default()
    };
    scene.validate().map_err(to_py)?;
    let img = generate_image(&scene, &mut seeded(seed));
    let gt = img
        .gt
        .iter()
        .map(|g| (g.rect.x, g.rect.y, g.rect.w, g.rect.h, g.class_id))
        .collect();
    let shape = img.pixels.shape().to_vec();
    Ok((img.pixels.into_data(), shape, gt))
}

/// Runs the command-line interface with `argv` (without the program name)
/// and returns its exit code.
#[pyfunction]
fn main(argv: Vec<String>) -> i32 {
    scrl_core::cli::init_logging();
    scrl_core::cli::dispatch(std::iter::once("scrl".to_string()).chain(argv))
}

#[pymodule]
fn scrl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBox>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(sample_rois, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_image, m)?)?;
    m.add_function(wrap_pyfunction!(main, m)?)?;
    m.add("METRICS_HEADER", trainer::METRICS_HEADER)?;
    Ok(())
}

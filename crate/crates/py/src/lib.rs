//! Python bindings: tensors and the differentiable ops most worth poking at
//! from a notebook, synthetic data, metrics, training and the check suites.

use std::path::PathBuf;

use faewnet::config::KvConfig;
use faewnet::data::{self, ChangeSample};
use faewnet::metrics::{self, MetricReport};
use faewnet::model::Model;
use faewnet::nn::{self, LayerParams};
use faewnet::ops::SpectralMode;
use faewnet::selftest::{run_gradient_suite, run_suites};
use faewnet::train::{self, TrainRunConfig};
use faewnet::{Error, Tape};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) | Error::Dataset { .. } => PyOSError::new_err(e.to_string()),
        Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for faewnet::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Dense f64 tensor, row-major.
#[pyclass(name = "Tensor", module = "faewnet", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyTensor(faewnet::Tensor<f64>);

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        faewnet::Tensor::new(&shape, data).py().map(Self)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self(faewnet::Tensor::zeros(&shape))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.0.clone().reshape(&shape).py().map(Self)
    }

    fn __len__(&self) -> usize {
        self.0.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

fn unary(
    x: &PyTensor,
    f: impl FnOnce(&mut Tape<f64>, faewnet::Var) -> faewnet::Result<faewnet::Var>,
) -> PyResult<PyTensor> {
    let mut t = Tape::new();
    let v = t.constant(x.0.clone());
    let y = f(&mut t, v).py()?;
    Ok(PyTensor(t.value(y).clone()))
}

/// Fourier transform of an `N x L x C` tensor along both token axes.
/// `mode` is one of real, imag, amplitude, off.
#[pyfunction]
#[pyo3(signature = (x, mode = "real"))]
fn dft2(x: &PyTensor, mode: &str) -> PyResult<PyTensor> {
    let mode: SpectralMode = mode.parse().py()?;
    unary(x, |t, v| t.dft2(v, mode))
}

/// Bilinear warp of an NCHW tensor by an `N x 2 x H x W` pixel displacement.
#[pyfunction]
fn warp(x: &PyTensor, flow: &PyTensor) -> PyResult<PyTensor> {
    unary(x, |t, v| {
        let f = t.constant(flow.0.clone());
        t.grid_sample(v, f)
    })
}

/// 3x3 neighbourhood gather, `N x C x H x W -> N x 9C x HW`.
#[pyfunction]
fn unfold3x3(x: &PyTensor) -> PyResult<PyTensor> {
    unary(x, |t, v| t.unfold3x3(v))
}

#[pyfunction]
#[pyo3(signature = (x, w, b = None, stride = 1, padding = 0, dilation = 1, groups = 1))]
fn conv2d(
    x: &PyTensor,
    w: &PyTensor,
    b: Option<&PyTensor>,
    stride: usize,
    padding: usize,
    dilation: usize,
    groups: usize,
) -> PyResult<PyTensor> {
    unary(x, |t, v| {
        let wv = t.constant(w.0.clone());
        let bv = b.map(|b| t.constant(b.0.clone()));
        t.conv2d(v, wv, bv, stride, padding, dilation, groups)
    })
}

/// Generator parameters for synthetic building pairs.
#[pyclass(name = "GenSpec", module = "faewnet", skip_from_py_object)]
#[derive(Clone)]
struct PyGenSpec(data::GenSpec);

#[pymethods]
impl PyGenSpec {
    /// Keyword overrides use the config-file keys (`size`, `buildings_min`, `p_add`, ...).
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let kv = kv_from(overrides, data::GenSpec::KEYS)?;
        data::GenSpec::from_kv(&kv).py().map(Self)
    }

    #[getter]
    fn size(&self) -> u32 {
        self.0.size
    }

    #[getter]
    fn change_probs(&self) -> (f64, f64, f64) {
        self.0.change_probs
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

fn kv_from(overrides: Option<&Bound<'_, PyDict>>, known: &[&str]) -> PyResult<KvConfig> {
    let mut kv = KvConfig::default();
    for (k, v) in overrides.into_iter().flatten() {
        let key: String = k.extract()?;
        let value = match v.extract::<bool>() {
            Ok(b) if v.is_instance_of::<pyo3::types::PyBool>() => b.to_string(),
            _ => v.str()?.to_string(),
        };
        kv.set(key, value);
    }
    kv.check_known(known).py()?;
    Ok(kv)
}

/// One bi-temporal pair. Images are packed RGB bytes, the mask is one byte
/// per pixel with 1 for changed.
#[pyclass(name = "Sample", module = "faewnet", frozen, from_py_object)]
#[derive(Clone)]
struct PySample(ChangeSample);

#[pymethods]
impl PySample {
    #[getter]
    fn width(&self) -> u32 {
        self.0.size().0
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.size().1
    }

    #[getter]
    fn t1<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.t1.as_raw())
    }

    #[getter]
    fn t2<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.t2.as_raw())
    }

    #[getter]
    fn mask<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.mask.as_raw())
    }

    /// Translation applied to T2, in pixels.
    #[getter]
    fn shift(&self) -> (i32, i32) {
        self.0.meta.shift
    }

    fn __repr__(&self) -> String {
        let changed = self.0.mask.as_raw().iter().filter(|&&v| v == 1).count();
        format!("Sample({}x{}, {changed} changed px)", self.width(), self.height())
    }
}

fn unwrap_samples(samples: Vec<PySample>) -> Vec<ChangeSample> {
    samples.into_iter().map(|s| s.0).collect()
}

#[pyfunction]
#[pyo3(signature = (spec, seed, count))]
fn generate(spec: &PyGenSpec, seed: u64, count: usize) -> PyResult<Vec<PySample>> {
    Ok(data::generate_set(&spec.0, seed, count).py()?.into_iter().map(PySample).collect())
}

#[pyfunction]
fn write_dataset(samples: Vec<PySample>, root: PathBuf) -> PyResult<()> {
    data::write_dataset(&unwrap_samples(samples), root).py()
}

#[pyfunction]
fn read_dataset(root: PathBuf) -> PyResult<Vec<PySample>> {
    Ok(data::read_dataset(root).py()?.into_iter().map(PySample).collect())
}

/// Confusion counts with Pr, Rc, F1 and IoU in percent.
#[pyclass(name = "Metrics", module = "faewnet", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyMetrics(MetricReport);

#[pymethods]
impl PyMetrics {
    #[getter]
    fn tp(&self) -> u64 {
        self.0.counts.tp
    }
    #[getter]
    fn fp(&self) -> u64 {
        self.0.counts.fp
    }
    #[getter(r#fn)]
    fn fn_(&self) -> u64 {
        self.0.counts.fn_
    }
    #[getter]
    fn tn(&self) -> u64 {
        self.0.counts.tn
    }
    #[getter]
    fn pr(&self) -> f64 {
        self.0.pr
    }
    #[getter]
    fn rc(&self) -> f64 {
        self.0.rc
    }
    #[getter]
    fn f1(&self) -> f64 {
        self.0.f1
    }
    #[getter]
    fn iou(&self) -> f64 {
        self.0.iou
    }
    #[getter]
    fn degenerate(&self) -> bool {
        self.0.degenerate
    }

    fn row(&self) -> String {
        self.0.row()
    }

    fn __repr__(&self) -> String {
        format!("Metrics(Pr={:.2}, Rc={:.2}, F1={:.2}, IoU={:.2})", self.0.pr, self.0.rc, self.0.f1, self.0.iou)
    }
}

/// Scores a binary prediction against a binary truth map.
#[pyfunction]
fn score(pred: Vec<u8>, truth: Vec<u8>) -> PyResult<PyMetrics> {
    Ok(PyMetrics(metrics::derive_metrics(metrics::confusion_counts(&pred, &truth).py()?)))
}

/// Training run settings; keyword overrides use the config-file keys.
#[pyclass(name = "TrainConfig", module = "faewnet", skip_from_py_object)]
#[derive(Clone)]
struct PyTrainConfig(TrainRunConfig);

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        TrainRunConfig::from_kv(&kv_from(overrides, TrainRunConfig::KEYS)?).py().map(Self)
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.steps
    }
    #[getter]
    fn lr(&self) -> f64 {
        self.0.lr
    }
    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    fn __repr__(&self) -> String {
        format!("TrainConfig(steps={}, batch={}, lr={:e}, seed={})", self.0.steps, self.0.batch, self.0.lr, self.0.seed)
    }
}

/// A model with trained (or loaded) weights.
#[pyclass(name = "ChangeDetector", module = "faewnet", frozen)]
struct PyDetector {
    model: Model,
    params: LayerParams<f32>,
    /// `(step, loss, F1 or None)` per training step.
    trace: Vec<(usize, f64, Option<f64>)>,
    final_report: Option<MetricReport>,
}

#[pymethods]
impl PyDetector {
    /// Restores weights saved by `save` into the model described by `config`.
    #[staticmethod]
    fn load(config: &PyTrainConfig, path: PathBuf) -> PyResult<Self> {
        let model = Model::new(config.0.model.clone()).py()?;
        let mut params = model.init_params::<f32>(0).py()?;
        params.load_values(&nn::load_checkpoint(&path).py()?).py()?;
        Ok(Self { model, params, trace: Vec::new(), final_report: None })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        nn::save_checkpoint(&self.params, path).py()
    }

    /// Changed-pixel mask (one byte per pixel) for one pair.
    fn predict<'py>(&self, py: Python<'py>, sample: &PySample) -> PyResult<Bound<'py, PyBytes>> {
        let a = data::images_to_tensor([&sample.0.t1]).py()?;
        let b = data::images_to_tensor([&sample.0.t2]).py()?;
        let mask = py.detach(|| self.model.predict(&self.params, &a, &b)).py()?;
        Ok(PyBytes::new(py, &mask))
    }

    fn evaluate(&self, py: Python<'_>, samples: Vec<PySample>) -> PyResult<PyMetrics> {
        let samples = unwrap_samples(samples);
        Ok(PyMetrics(py.detach(|| train::evaluate(&self.model, &self.params, &samples, 8)).py()?))
    }

    #[getter]
    fn trace(&self) -> Vec<(usize, f64, Option<f64>)> {
        self.trace.clone()
    }

    #[getter]
    fn final_metrics(&self) -> Option<PyMetrics> {
        self.final_report.map(PyMetrics)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.params.iter().map(|(_, p)| p.value.numel()).sum()
    }
}

/// Trains from scratch. Deterministic for a given config and data.
#[pyfunction]
#[pyo3(signature = (config, train_set, val_set = Vec::new()))]
fn fit(
    py: Python<'_>,
    config: &PyTrainConfig,
    train_set: Vec<PySample>,
    val_set: Vec<PySample>,
) -> PyResult<PyDetector> {
    let (tr, va) = (unwrap_samples(train_set), unwrap_samples(val_set));
    let cfg = config.0.clone();
    let outcome = py.detach(|| train::train(&cfg, &tr, &va, |_| {})).py()?;
    Ok(PyDetector {
        model: Model::new(cfg.model).py()?,
        params: outcome.params,
        trace: outcome.trace.iter().map(|r| (r.step, r.loss, r.report.map(|m| m.f1))).collect(),
        final_report: outcome.final_report,
    })
}

/// Finite-difference gradient check: `(case, max relative error, passed)`.
#[pyfunction]
#[pyo3(signature = (only = None, tol = 1e-4))]
fn gradcheck(py: Python<'_>, only: Option<String>, tol: f64) -> PyResult<Vec<(String, f64, bool)>> {
    let results = py.detach(|| run_gradient_suite(only.as_deref(), tol)).py()?;
    Ok(results.into_iter().map(|r| (r.name, r.report.max_rel_err(), r.report.passed())).collect())
}

/// Oracle self-test suites: `(suite, passed, detail)`.
#[pyfunction]
#[pyo3(signature = (only = None))]
fn selftest(py: Python<'_>, only: Option<String>) -> PyResult<Vec<(String, bool, String)>> {
    let results = py.detach(|| run_suites(only.as_deref())).py()?;
    Ok(results.into_iter().map(|r| (r.name.to_string(), r.passed, r.detail)).collect())
}

#[pymodule]
#[pyo3(name = "faewnet")]
pub fn faewnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyGenSpec>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyMetrics>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(dft2, m)?)?;
    m.add_function(wrap_pyfunction!(warp, m)?)?;
    m.add_function(wrap_pyfunction!(unfold3x3, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(write_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(read_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(selftest, m)?)?;
    Ok(())
}

use std::path::PathBuf;

use evrep::eval_harness::{builtin_class_list, compare_representations, EvalDataset, RepSource};
use evrep::events_io::{encode_nmnist_bin, load_events, parse_nmnist_bin_sized, window_events, NMNIST_SIZE};
use evrep::generator::{load_checkpoint, save_checkpoint, CheckpointMeta};
use evrep::llm_client::{self, build_backend, BackendConfig, BackendKind, LlmBackend, Prediction};
use evrep::losses;
use evrep::representation::{encode_event_frame, encode_tencode, export_png, load_png};
use evrep::trainer::{load_pairs, TrainConfig, Trainer};
use evrep::{DatasetIndex, Event, GeneratorConfig, LossWeights, RepKind};
use ndarray::Array3;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

fn runtime<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn value<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "EventStream", module = "evrep_py", skip_from_py_object)]
#[derive(Clone)]
struct PyEventStream {
    inner: evrep::EventStream,
}

#[pymethods]
impl PyEventStream {
    /// `events` holds `(x, y, t, positive)` tuples in time order.
    #[new]
    #[pyo3(signature = (events, width = NMNIST_SIZE, height = NMNIST_SIZE))]
    fn new(events: Vec<(u32, u32, u64, bool)>, width: u32, height: u32) -> PyResult<Self> {
        let ev = events.into_iter().map(|(x, y, t, p)| Event::new(x, y, t, p)).collect();
        Ok(Self {
            inner: evrep::EventStream::new(ev, width, height).map_err(value)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, sensor = None))]
    fn load(path: PathBuf, sensor: Option<(u32, u32)>) -> PyResult<Self> {
        Ok(Self {
            inner: load_events(&path, sensor).map_err(value)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (data, width = NMNIST_SIZE, height = NMNIST_SIZE))]
    fn from_bytes(data: &[u8], width: u32, height: u32) -> PyResult<Self> {
        Ok(Self {
            inner: parse_nmnist_bin_sized(data, width, height).map_err(value)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        Ok(PyBytes::new(py, &encode_nmnist_bin(&self.inner).map_err(value)?))
    }

    fn events(&self) -> Vec<(u32, u32, u64, bool)> {
        self.inner.events().iter().map(|e| (e.x, e.y, e.t, e.is_positive())).collect()
    }

    #[getter]
    fn width(&self) -> u32 {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.inner.height()
    }

    fn full_window(&self) -> (u64, u64) {
        self.inner.full_window()
    }

    fn window(&self, t0: u64, t1: u64) -> PyResult<Self> {
        Ok(Self {
            inner: window_events(&self.inner, t0, t1).map_err(value)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("EventStream({} events, {}x{})", self.inner.len(), self.inner.width(), self.inner.height())
    }
}

/// Float RGB image in `[0, 1]`; pixels are exchanged as a flat row-major `(h, w, 3)` list.
#[pyclass(name = "RepImage", module = "evrep_py", skip_from_py_object)]
#[derive(Clone)]
struct PyRepImage {
    inner: evrep::RepImage,
}

#[pymethods]
impl PyRepImage {
    #[new]
    #[pyo3(signature = (pixels, height, width, kind = "external_frame"))]
    fn new(pixels: Vec<f64>, height: usize, width: usize, kind: &str) -> PyResult<Self> {
        let kind: RepKind = kind.parse().map_err(value)?;
        let arr = Array3::from_shape_vec((height, width, 3), pixels).map_err(value)?;
        Ok(Self {
            inner: evrep::RepImage::new(arr, kind),
        })
    }

    #[staticmethod]
    #[pyo3(signature = (path, size = None))]
    fn load(path: PathBuf, size: Option<(u32, u32)>) -> PyResult<Self> {
        Ok(Self {
            inner: load_png(&path, RepKind::ExternalFrame, size).map_err(value)?,
        })
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind.as_str()
    }

    fn pixels(&self) -> Vec<f64> {
        self.inner.pixels.iter().copied().collect()
    }

    fn to_rgb8<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_rgb8())
    }

    fn png<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.encode_png())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        export_png(&self.inner, &path).map_err(value)
    }

    fn sha256(&self) -> String {
        self.inner.content_sha256()
    }

    fn __repr__(&self) -> String {
        format!("RepImage({}, {}x{})", self.inner.kind, self.inner.width(), self.inner.height())
    }
}

fn window(stream: &evrep::EventStream, t0: Option<u64>, t1: Option<u64>) -> (u64, u64) {
    let (a, b) = stream.full_window();
    (t0.unwrap_or(a), t1.unwrap_or(b))
}

/// Tencode frame over `[t0, t1)`; defaults to the full stream.
#[pyfunction]
#[pyo3(signature = (stream, t0 = None, t1 = None))]
fn tencode(stream: &PyEventStream, t0: Option<u64>, t1: Option<u64>) -> PyResult<PyRepImage> {
    let (t0, t1) = window(&stream.inner, t0, t1);
    Ok(PyRepImage {
        inner: encode_tencode(&stream.inner, t0, t1).map_err(value)?.into_rep(),
    })
}

#[pyfunction]
#[pyo3(signature = (stream, t0 = None, t1 = None))]
fn event_frame(stream: &PyEventStream, t0: Option<u64>, t1: Option<u64>) -> PyResult<PyRepImage> {
    let (t0, t1) = window(&stream.inner, t0, t1);
    Ok(PyRepImage {
        inner: encode_event_frame(&stream.inner, t0, t1).map_err(value)?,
    })
}

#[pyfunction]
fn jaccard_loss(a: &str, b: &str) -> f64 {
    losses::jaccard_loss(a, b)
}

#[pyfunction]
fn fidelity_loss(output: &PyRepImage, target: &PyRepImage) -> PyResult<f64> {
    losses::fidelity_loss(output.inner.pixels.view(), target.inner.pixels.view()).map_err(value)
}

#[pyfunction]
#[pyo3(signature = (semantic, fidelity, lambda_semantic = 1.0, gamma_fidelity = 1.0))]
fn dual_loss(semantic: f64, fidelity: f64, lambda_semantic: f64, gamma_fidelity: f64) -> PyResult<f64> {
    let w = LossWeights::new(lambda_semantic, gamma_fidelity).map_err(value)?;
    Ok(losses::dual_loss(semantic, fidelity, &w).map_err(value)?.dual)
}

fn preset(name: &str) -> PyResult<GeneratorConfig> {
    match name {
        "tiny" => Ok(GeneratorConfig::tiny()),
        "standard" => Ok(GeneratorConfig::default()),
        other => Err(value(format!("unknown preset {other:?} (expected tiny or standard)"))),
    }
}

#[pyclass(name = "Generator", module = "evrep_py", skip_from_py_object)]
#[derive(Clone)]
struct PyGenerator {
    inner: evrep::Generator,
}

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (preset = "tiny", seed = 0))]
    fn new(preset: &str, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: evrep::Generator::build(self::preset(preset)?, seed).map_err(value)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(runtime)?.generator,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&path, &self.inner, &CheckpointMeta::default(), None).map_err(runtime)
    }

    fn generate(&self, image: &PyRepImage) -> PyResult<PyRepImage> {
        let out = self.inner.generate(&image.inner.pixels).map_err(value)?;
        Ok(PyRepImage {
            inner: evrep::RepImage::new(out, RepKind::Evrep),
        })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }
}

#[pyclass(name = "Backend", module = "evrep_py")]
struct PyBackend {
    inner: Box<dyn LlmBackend>,
}

#[pymethods]
impl PyBackend {
    #[new]
    #[pyo3(signature = (kind = "mock", fixture = None, endpoint = None, model = None, api_key_env = None))]
    fn new(
        kind: &str,
        fixture: Option<PathBuf>,
        endpoint: Option<String>,
        model: Option<String>,
        api_key_env: Option<String>,
    ) -> PyResult<Self> {
        let mut config = BackendConfig {
            kind: kind.parse::<BackendKind>().map_err(value)?,
            fixture,
            endpoint,
            model,
            ..Default::default()
        };
        if let Some(k) = api_key_env {
            config.api_key_env = k;
        }
        Ok(Self {
            inner: build_backend(&config).map_err(value)?,
        })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id().to_string()
    }

    fn caption(&self, py: Python<'_>, image: &PyRepImage) -> PyResult<String> {
        let img = image.inner.clone();
        let backend = &self.inner;
        py.detach(|| llm_client::describe(backend, &img))
            .map(|r| r.text)
            .map_err(runtime)
    }

    /// Returns the raw reply and the parsed label (`None` when unrecognized).
    fn recognize(&self, py: Python<'_>, image: &PyRepImage, classes: Vec<String>) -> PyResult<(String, Option<String>)> {
        let img = image.inner.clone();
        let backend = &self.inner;
        let resp = py
            .detach(|| llm_client::recognize(backend, &img, &classes))
            .map_err(runtime)?;
        let label = match llm_client::parse_prediction(&resp.text, &classes) {
            Prediction::Label(l) => Some(l),
            Prediction::Unknown => None,
        };
        Ok((resp.text, label))
    }
}

#[pyfunction]
fn parse_prediction(text: &str, classes: Vec<String>) -> Option<String> {
    llm_client::parse_prediction(text, &classes).label().map(str::to_owned)
}

#[pyfunction]
fn class_list(name: &str) -> PyResult<Vec<String>> {
    builtin_class_list(name).ok_or_else(|| value(format!("no built-in class list {name:?}")))
}

/// Trains on a dataset directory whose samples carry RGB pairs.
#[allow(clippy::too_many_arguments)]
#[pyfunction]
#[pyo3(signature = (train_dir, backend, out_dir = None, val_dir = None, generator = None, epochs = 1,
                    batch_size = 16, learning_rate = 1e-4, lambda_semantic = 1.0, gamma_fidelity = 1.0, seed = 0))]
fn train<'py>(
    py: Python<'py>,
    train_dir: PathBuf,
    backend: &PyBackend,
    out_dir: Option<PathBuf>,
    val_dir: Option<PathBuf>,
    generator: Option<&PyGenerator>,
    epochs: u64,
    batch_size: usize,
    learning_rate: f64,
    lambda_semantic: f64,
    gamma_fidelity: f64,
    seed: u64,
) -> PyResult<(PyGenerator, Bound<'py, PyDict>)> {
    let config = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        weights: LossWeights::new(lambda_semantic, gamma_fidelity).map_err(value)?,
        seed,
        ..Default::default()
    };
    let train_pairs = load_pairs(&DatasetIndex::open(&train_dir).map_err(value)?, None).map_err(value)?;
    let val_pairs = match &val_dir {
        Some(d) => load_pairs(&DatasetIndex::open(d).map_err(value)?, None).map_err(value)?,
        None => Vec::new(),
    };
    let g = match generator {
        Some(g) => g.inner.clone(),
        None => evrep::Generator::build(GeneratorConfig::tiny(), seed).map_err(value)?,
    };
    let b = &backend.inner;
    let outcome = py
        .detach(|| {
            let mut t = Trainer::new(g, b, config)?;
            if let Some(d) = &out_dir {
                t = t.with_output_dir(d);
            }
            t.fit(&train_pairs, &val_pairs)
        })
        .map_err(runtime)?;
    let summary = PyDict::new(py);
    summary.set_item("steps", outcome.state.step)?;
    summary.set_item("fidelity", outcome.metrics.iter().map(|m| m.loss.fidelity).collect::<Vec<_>>())?;
    summary.set_item("semantic", outcome.metrics.iter().map(|m| m.loss.semantic).collect::<Vec<_>>())?;
    summary.set_item("checkpoint", outcome.final_checkpoint.map(|p| p.display().to_string()))?;
    Ok((PyGenerator { inner: outcome.generator }, summary))
}

/// Zero-shot recognition over one dataset; returns one dict per report row.
#[pyfunction]
#[pyo3(signature = (dataset_dir, backend, out_dir, kinds = vec!["event_frame".to_string(), "tencode".to_string()],
                    generator = None, classes = None, name = "dataset"))]
#[allow(clippy::too_many_arguments)]
fn evaluate<'py>(
    py: Python<'py>,
    dataset_dir: PathBuf,
    backend: &PyBackend,
    out_dir: PathBuf,
    kinds: Vec<String>,
    generator: Option<&PyGenerator>,
    classes: Option<Vec<String>>,
    name: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let mut index = DatasetIndex::open(&dataset_dir).map_err(value)?;
    if let Some(c) = classes {
        index = DatasetIndex::new(index.samples().to_vec(), c).map_err(value)?;
    }
    let dataset = EvalDataset {
        name: name.to_string(),
        index,
        sensor: None,
    };
    let sources = kinds
        .iter()
        .map(|k| match k.parse::<RepKind>().map_err(value)? {
            RepKind::Evrep => Ok(match generator {
                Some(g) => RepSource::evrep(g.inner.clone()),
                None => RepSource::new(RepKind::Evrep),
            }),
            other => Ok(RepSource::new(other)),
        })
        .collect::<PyResult<Vec<_>>>()?;
    let b: &dyn LlmBackend = &*backend.inner;
    let cmp = py
        .detach(|| compare_representations(&[dataset], &sources, &[b], &out_dir, None))
        .map_err(runtime)?;
    cmp.report
        .rows
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("backend", &r.backend)?;
            d.set_item("kind", &r.kind)?;
            d.set_item("dataset", &r.dataset)?;
            d.set_item("accuracy_pct", r.accuracy_pct)?;
            d.set_item("correct", r.correct)?;
            d.set_item("total", r.total)?;
            d.set_item("unknown", r.unknown)?;
            d.set_item("best", r.best_flag)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn evrep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyEventStream>()?;
    m.add_class::<PyRepImage>()?;
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyBackend>()?;
    m.add_function(wrap_pyfunction!(tencode, m)?)?;
    m.add_function(wrap_pyfunction!(event_frame, m)?)?;
    m.add_function(wrap_pyfunction!(jaccard_loss, m)?)?;
    m.add_function(wrap_pyfunction!(fidelity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(dual_loss, m)?)?;
    m.add_function(wrap_pyfunction!(parse_prediction, m)?)?;
    m.add_function(wrap_pyfunction!(class_list, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

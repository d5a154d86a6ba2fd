//! Python bindings: configs, training, checkpoints, metrics and dataset tools.

use std::path::PathBuf;

use memefusion_core::config::RunConfig;
use memefusion_core::convert::{convert_clip_hf, convert_phi, ConvertKind};
use memefusion_core::data::{
    generate_synthetic_confounders, load_image_file, partition_synthetic, write_hmc_dataset, ImageRef, MemeRecord,
};
use memefusion_core::eval::{self, MetricsReport, Scorer, TrainedScorer};
use memefusion_core::training::pipeline::{load_named_split, test_split_name};
use memefusion_core::training::{load_splits, run_training, FrozenStack, JsonlRunLog, NullLog, PreparedData, RunLog, StageSelect};
use memefusion_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(memefusion, MemefusionError, PyException, "Base class for library errors.");
create_exception!(memefusion, ConfigError, MemefusionError, "Invalid config, argument or missing dataset.");
create_exception!(memefusion, DivergedError, MemefusionError, "Training produced a non-finite loss.");
create_exception!(memefusion, CheckpointError, MemefusionError, "Corrupt, unloadable or incompatible weights.");
create_exception!(memefusion, DataError, MemefusionError, "Unreadable image, record or label.");

fn py_err(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::Config { .. } | Error::Argument(_) | Error::DatasetNotFound(_) | Error::UndefinedMetric(_) => {
            ConfigError::new_err(msg)
        }
        Error::Diverged { .. } => DivergedError::new_err(msg),
        Error::Corruption { .. } | Error::WeightLoad { .. } | Error::Compatibility(_) => CheckpointError::new_err(msg),
        Error::ImageDecode { .. } | Error::Parse { .. } | Error::LabelScheme(_) => DataError::new_err(msg),
        _ => MemefusionError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for memefusion_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// A validated run configuration.
#[pyclass(name = "RunConfig", module = "memefusion", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// The built-in mock config, optionally with `key=value` overrides.
    #[new]
    #[pyo3(signature = (overrides = Vec::new()))]
    fn new(overrides: Vec<String>) -> PyResult<Self> {
        Self::wrap(RunConfig::default().with_overrides(&overrides).py()?)
    }

    #[staticmethod]
    #[pyo3(signature = (path, overrides = Vec::new()))]
    fn load(path: PathBuf, overrides: Vec<String>) -> PyResult<Self> {
        Self::wrap(RunConfig::load(&path).py()?.with_overrides(&overrides).py()?)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Self::wrap(RunConfig::from_json_str(text).py()?)
    }

    /// Returns a copy with `key=value` overrides applied.
    fn with_overrides(&self, overrides: Vec<String>) -> PyResult<Self> {
        Self::wrap(self.inner.with_overrides(&overrides).py()?)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.resolved_seed()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn to_json(&self) -> String {
        self.inner.canonical_json()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(hash={:?})", self.inner.hash())
    }
}

impl PyRunConfig {
    fn wrap(cfg: RunConfig) -> PyResult<Self> {
        cfg.validate().py()?;
        Ok(Self { inner: cfg.effective() })
    }
}

/// Metrics for one scored split.
#[pyclass(name = "MetricsReport", module = "memefusion", frozen)]
struct PyReport {
    inner: MetricsReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn split(&self) -> &str {
        &self.inner.split
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn accuracy(&self) -> f64 {
        self.inner.accuracy
    }

    /// `None` when the split holds a single class.
    #[getter]
    fn auroc(&self) -> Option<f64> {
        self.inner.auroc
    }

    #[getter]
    fn config_hash(&self) -> &str {
        &self.inner.config_hash
    }

    /// Per-sample `(id, score, label)` triples.
    fn records(&self) -> Vec<(String, f64, u8)> {
        self.inner.records.iter().map(|r| (r.id.clone(), r.score, r.label)).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().py()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn __repr__(&self) -> String {
        self.inner.summary().trim_end().replace('\n', " ")
    }
}

/// A trained model loaded from a checkpoint directory.
#[pyclass(name = "Model", module = "memefusion", unsendable)]
struct PyModel {
    scorer: TrainedScorer,
    config: RunConfig,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = memefusion_core::training::Checkpoint::load(&path).py()?;
        let config = ck.manifest.run_config().py()?;
        Ok(Self {
            scorer: TrainedScorer::from_checkpoint(&ck).py()?,
            config,
        })
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.scorer.config_hash()
    }

    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig { inner: self.config.clone() }
    }

    /// Probability that the image-text pair is hateful.
    #[pyo3(signature = (image, text = ""))]
    fn predict(&self, image: PathBuf, text: &str) -> PyResult<f64> {
        load_image_file(&image).py()?;
        let record = MemeRecord {
            id: "input".into(),
            image_ref: ImageRef::File(image),
            text: text.to_string(),
            label: None,
        };
        Ok(self.scorer.score(&[record]).py()?[0])
    }

    /// Scores a labeled split; defaults to the source's test split.
    #[pyo3(signature = (split = None, overrides = Vec::new()))]
    fn evaluate(&self, split: Option<&str>, overrides: Vec<String>) -> PyResult<PyReport> {
        let cfg = self.config.with_overrides(&overrides).py()?;
        let name = match split {
            Some(s) => s.parse().py()?,
            None => test_split_name(cfg.data.source),
        };
        let data = load_named_split(&cfg, name).py()?;
        Ok(PyReport {
            inner: eval::evaluate(&self.scorer, &data).py()?,
        })
    }
}

/// Trains `stage` ("1", "2" or "all") and writes checkpoints under `out`.
/// Returns the checkpoint directories that were written.
#[pyfunction]
#[pyo3(signature = (config, out, stage = "all", log = true))]
fn train(config: &PyRunConfig, out: PathBuf, stage: &str, log: bool) -> PyResult<Vec<PathBuf>> {
    let select: StageSelect = stage.parse().py()?;
    let cfg = &config.inner;
    if select == StageSelect::Two && cfg.ablation.use_two_stage {
        return Err(ConfigError::new_err("stage 2 needs a stage-1 checkpoint; train stage \"all\" instead"));
    }
    std::fs::create_dir_all(&out).map_err(|e| py_err(e.into()))?;
    std::fs::write(out.join("config.json"), cfg.canonical_json()).map_err(|e| py_err(e.into()))?;
    let stack = FrozenStack::from_config(cfg).py()?;
    let splits = load_splits(cfg).py()?;
    let data = PreparedData::extract(&stack, &splits).py()?;
    let mut sink: Box<dyn RunLog> = if log {
        Box::new(JsonlRunLog::create(&out.join("train_log.jsonl")).py()?)
    } else {
        Box::new(NullLog)
    };
    let run = run_training(cfg, &stack, &data, select, None, Some(&out), sink.as_mut()).py()?;
    let mut written = Vec::new();
    if run.stage1.is_some() {
        written.push(out.join("stage1"));
    }
    if run.final_model.is_some() {
        written.push(out.join("final"));
    }
    Ok(written)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::auroc(&scores, &labels).py()
}

#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = 0.5))]
fn accuracy(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<f64> {
    eval::accuracy(&scores, &labels, threshold).py()
}

/// Writes a synthetic XOR dataset and returns the split sizes.
#[pyfunction]
#[pyo3(signature = (out, n = 1024, seed = 0, dev_fraction = 0.1, test_fraction = 0.2))]
fn synth(out: PathBuf, n: usize, seed: u64, dev_fraction: f64, test_fraction: f64) -> PyResult<Vec<(String, usize)>> {
    let all = generate_synthetic_confounders(n, seed).py()?;
    let (train, dev, test) = partition_synthetic(&all, dev_fraction, test_fraction).py()?;
    write_hmc_dataset(&out, &[&train, &dev, &test]).py()?;
    Ok([&train, &dev, &test].iter().map(|s| (s.name.to_string(), s.len())).collect())
}

/// Converts safetensors weights (`kind` is "clip-hf" or "phi") into an
/// archive directory and returns its blob checksum.
#[pyfunction]
#[pyo3(signature = (kind, input, out, merges = None))]
fn convert_weights(kind: &str, input: PathBuf, out: PathBuf, merges: Option<PathBuf>) -> PyResult<String> {
    let manifest = match kind.parse::<ConvertKind>().py()? {
        ConvertKind::ClipHf => convert_clip_hf(&input, &out, merges.as_deref()).py()?,
        ConvertKind::Phi => convert_phi(&input, &out).py()?,
    };
    Ok(manifest.blob_sha256)
}

#[pymodule]
fn memefusion(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("MemefusionError", py.get_type::<MemefusionError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("DivergedError", py.get_type::<DivergedError>())?;
    m.add("CheckpointError", py.get_type::<CheckpointError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(auroc, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(convert_weights, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

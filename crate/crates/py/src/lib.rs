//! Python module `fpcil`.

use std::collections::{BTreeMap, HashSet};
use std::path::PathBuf;

use fpcil_core::genbridge;
use fpcil_core::heads::{HeadConfig, HeadKind, HeadState};
use fpcil_core::predictor::{self, PredictionTally, RestrictionThresholds};
use fpcil_core::protocol::{self, normalize_name, ClassCatalog, StepAccuracy};
use fpcil_core::runner::{self, ExperimentMatrix, ScenarioConfig};
use fpcil_core::{ClassId, EmbeddingSample, Error, Origin, Split};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(fpcil, FpcilError, PyException);
create_exception!(fpcil, ConfigError, FpcilError);
create_exception!(fpcil, ProtocolError, FpcilError);
create_exception!(fpcil, NumericalError, FpcilError);
create_exception!(fpcil, DataError, FpcilError);

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        2 => ConfigError::new_err(msg),
        3 => ProtocolError::new_err(msg),
        4 => NumericalError::new_err(msg),
        5 => DataError::new_err(msg),
        _ => FpcilError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for fpcil_core::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn parse_origin(s: &str) -> PyResult<Origin> {
    match s {
        "real" => Ok(Origin::Real),
        "synthetic" => Ok(Origin::Synthetic),
        _ => Err(ConfigError::new_err(format!("origin must be 'real' or 'synthetic', got {s:?}"))),
    }
}

fn parse_split(s: &str) -> PyResult<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(ConfigError::new_err(format!("split must be 'train' or 'test', got {s:?}"))),
    }
}

/// A scenario configuration. Build one with `reference()` or
/// `from_toml()`, then adjust fields with `set("world.dim", "32")`.
#[pyclass(name = "ScenarioConfig", from_py_object)]
#[derive(Clone)]
struct PyScenarioConfig {
    inner: ScenarioConfig,
}

#[pymethods]
impl PyScenarioConfig {
    #[staticmethod]
    fn reference() -> Self {
        Self {
            inner: ScenarioConfig::reference(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: ScenarioConfig::from_toml(text).py_err()?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    /// Apply one `key=value` override; the value is a TOML literal.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner = self.inner.with_overrides(&[format!("{key}={value}")]).py_err()?;
        Ok(())
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py_err()
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn eval_seeds(&self) -> Vec<u64> {
        self.inner.eval_seeds.clone()
    }

    fn __repr__(&self) -> String {
        format!("ScenarioConfig(name={:?}, digest={})", self.inner.name, &self.inner.digest()[..12])
    }
}

#[pyclass(name = "StepAccuracy", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyStepAccuracy {
    #[pyo3(get)]
    step_index: usize,
    #[pyo3(get)]
    correct: u64,
    #[pyo3(get)]
    total: u64,
    #[pyo3(get)]
    top1: f64,
    #[pyo3(get)]
    seen_classes: Vec<ClassId>,
}

impl From<&StepAccuracy> for PyStepAccuracy {
    fn from(s: &StepAccuracy) -> Self {
        Self {
            step_index: s.step_index,
            correct: s.correct,
            total: s.total,
            top1: s.top1,
            seen_classes: s.seen_classes.clone(),
        }
    }
}

#[pyclass(name = "RunReport", frozen, skip_from_py_object)]
struct PyRunReport {
    inner: protocol::RunReport,
}

#[pymethods]
impl PyRunReport {
    #[getter]
    fn scenario(&self) -> String {
        self.inner.scenario.clone()
    }

    #[getter]
    fn protocol(&self) -> String {
        self.inner.protocol.clone()
    }

    #[getter]
    fn head(&self) -> String {
        self.inner.head.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn average_incremental_accuracy(&self) -> f64 {
        self.inner.average_incremental_accuracy
    }

    #[getter]
    fn last_accuracy(&self) -> f64 {
        self.inner.last_accuracy
    }

    #[getter]
    fn per_step(&self) -> Vec<PyStepAccuracy> {
        self.inner.per_step.iter().map(PyStepAccuracy::from).collect()
    }

    #[getter]
    fn config_digest(&self) -> String {
        self.inner.config_digest.clone()
    }

    #[getter]
    fn extractor_digest(&self) -> String {
        self.inner.extractor_digest.clone()
    }

    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("report serializes")
    }

    fn steps_csv(&self) -> String {
        runner::render_steps_csv(&self.inner)
    }

    /// Write `report.json` and `steps.csv`; returns the run directory.
    fn write(&self, output_dir: PathBuf) -> PyResult<PathBuf> {
        runner::write_run_report(&output_dir, &self.inner).py_err()
    }

    fn __repr__(&self) -> String {
        format!(
            "RunReport({} {} {} seed={} AIA={:.4} last={:.4})",
            self.inner.scenario,
            self.inner.protocol,
            self.inner.head,
            self.inner.seed,
            self.inner.average_incremental_accuracy,
            self.inner.last_accuracy
        )
    }
}

/// Run one scenario under one evaluation seed. The GIL is released while
/// the run is in progress.
#[pyfunction]
fn run_scenario(py: Python<'_>, config: &PyScenarioConfig, seed: u64) -> PyResult<PyRunReport> {
    let cfg = config.inner.clone();
    let outcome = py.detach(move || runner::run_fpcil_scenario(&cfg, seed)).py_err()?;
    Ok(PyRunReport { inner: outcome.report })
}

/// Run an experiment matrix given as TOML text; returns the result as JSON.
#[pyfunction]
#[pyo3(signature = (matrix_toml, overrides = Vec::new()))]
fn run_matrix(py: Python<'_>, matrix_toml: &str, overrides: Vec<String>) -> PyResult<String> {
    let matrix = ExperimentMatrix::from_toml_with_overrides(matrix_toml, &overrides).py_err()?;
    let result = py.detach(move || runner::run_matrix(&matrix)).py_err()?;
    Ok(serde_json::to_string(&result).expect("result serializes"))
}

#[pyfunction]
fn read_report(path: PathBuf) -> PyResult<PyRunReport> {
    Ok(PyRunReport {
        inner: runner::read_run_report(&path).py_err()?,
    })
}

/// Class ids per step for a catalog of `num_classes` classes.
#[pyfunction]
fn build_schedule(num_classes: usize, base_size: usize, inc_size: usize, order_seed: u64) -> PyResult<Vec<Vec<ClassId>>> {
    let catalog = ClassCatalog::synthetic(num_classes);
    Ok(protocol::build_schedule(&catalog, base_size, inc_size, order_seed)
        .py_err()?
        .steps)
}

#[pyfunction]
fn average_incremental_accuracy(step_accuracies: Vec<f64>) -> PyResult<f64> {
    let steps: Vec<StepAccuracy> = step_accuracies
        .iter()
        .enumerate()
        .map(|(i, &top1)| StepAccuracy {
            step_index: i + 1,
            seen_classes: Vec::new(),
            correct: 0,
            total: 0,
            top1,
        })
        .collect();
    protocol::average_incremental_accuracy(&steps).py_err()
}

/// An incremental classifier head on fixed features.
#[pyclass(name = "Head", skip_from_py_object)]
struct PyHead {
    inner: HeadState,
}

#[pymethods]
impl PyHead {
    #[new]
    fn new(kind: &str) -> PyResult<Self> {
        let kind: HeadKind = kind.parse().py_err()?;
        Ok(Self {
            inner: HeadState::new(HeadConfig::new(kind)),
        })
    }

    /// Add one step's classes: `{class_id: [[f, ...], ...]}`.
    fn update(&mut self, py: Python<'_>, features: BTreeMap<ClassId, Vec<Vec<f64>>>) -> PyResult<()> {
        let inner = &mut self.inner;
        py.detach(|| inner.update(features)).py_err()
    }

    fn predict(&self, x: Vec<f64>) -> PyResult<ClassId> {
        self.inner.predict(&x).py_err()
    }

    fn predict_batch(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<ClassId>> {
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        self.inner.predict_batch(&refs).py_err()
    }

    #[getter]
    fn classes(&self) -> Vec<ClassId> {
        self.inner.classes()
    }

    #[getter]
    fn retained_floats(&self) -> usize {
        self.inner.retained_floats()
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().label()
    }
}

#[pyfunction]
fn build_future_prompt(initial_names: Vec<String>) -> PyResult<String> {
    predictor::build_future_prompt(&initial_names).py_err()
}

#[pyfunction]
#[pyo3(signature = (text, vocabulary = None))]
fn parse_transcript(text: &str, vocabulary: Option<Vec<String>>) -> Vec<String> {
    let vocab: Option<HashSet<String>> = vocabulary.map(|v| v.iter().map(|n| normalize_name(n)).collect());
    predictor::parse_transcript(text, vocab.as_ref())
}

/// Tally transcripts and select names at the three restriction levels.
/// Returns `(counts, {"full": [...], "R1": [...], "R2": [...]})`.
#[pyfunction]
#[pyo3(signature = (transcripts, initial_names, thresholds = (1, 4, 7)))]
fn tally_transcripts(
    transcripts: Vec<String>,
    initial_names: Vec<String>,
    thresholds: (u32, u32, u32),
) -> PyResult<(BTreeMap<String, u32>, BTreeMap<String, Vec<String>>)> {
    let thresholds = RestrictionThresholds {
        full: thresholds.0,
        r1: thresholds.1,
        r2: thresholds.2,
    };
    thresholds.validate().py_err()?;
    let names: Vec<Vec<String>> = transcripts.iter().map(|t| predictor::parse_transcript(t, None)).collect();
    let tally = PredictionTally::from_names(&names);
    let exclude: HashSet<String> = initial_names.iter().map(|n| normalize_name(n)).collect();
    let selections = thresholds
        .levels()
        .iter()
        .map(|l| {
            let key = match l.level {
                predictor::Level::Full => "full",
                predictor::Level::R1 => "R1",
                predictor::Level::R2 => "R2",
            };
            (key.to_string(), tally.select(l, &exclude).into_iter().collect())
        })
        .collect();
    Ok((tally.counts, selections))
}

#[pyfunction]
fn build_generation_prompt(name: &str, definition: &str) -> PyResult<String> {
    Ok(genbridge::build_generation_prompt(name, definition).py_err()?.prompt)
}

/// Lexicon TSV to a generation manifest (JSON lines text).
#[pyfunction]
#[pyo3(signature = (lexicon_path, n_samples = 500, guidance_scale = 2.0, seed = 0))]
fn manifest_from_lexicon(lexicon_path: PathBuf, n_samples: usize, guidance_scale: f64, seed: u64) -> PyResult<String> {
    let catalog = genbridge::read_lexicon(&lexicon_path).py_err()?;
    let defaults = genbridge::GenerationDefaults {
        n_samples,
        guidance_scale,
        seed,
        template: genbridge::PromptTemplate::Plain,
    };
    let specs = genbridge::prompt_specs(catalog.entries(), &defaults).py_err()?;
    genbridge::render_manifest(&specs).py_err()
}

type SampleTuple = (Vec<f64>, ClassId, String, String);

/// Read an embedding container; returns `(features, class_id, origin, split)`
/// tuples.
#[pyfunction]
#[pyo3(signature = (data_path, metadata_path = None))]
fn read_embeddings(data_path: PathBuf, metadata_path: Option<PathBuf>) -> PyResult<Vec<SampleTuple>> {
    let meta = metadata_path.unwrap_or_else(|| genbridge::metadata_path_for(&data_path));
    let samples = genbridge::ingest_embedding_file(&data_path, &meta).py_err()?;
    Ok(samples
        .into_iter()
        .map(|s| (s.features, s.class_id, s.origin.to_string(), s.split.to_string()))
        .collect())
}

#[pyfunction]
#[pyo3(signature = (data_path, samples, metadata_path = None))]
fn write_embeddings(data_path: PathBuf, samples: Vec<SampleTuple>, metadata_path: Option<PathBuf>) -> PyResult<()> {
    let meta = metadata_path.unwrap_or_else(|| genbridge::metadata_path_for(&data_path));
    let samples = samples
        .into_iter()
        .map(|(f, c, o, s)| Ok(EmbeddingSample::new(f, c, parse_origin(&o)?, parse_split(&s)?)))
        .collect::<PyResult<Vec<_>>>()?;
    genbridge::write_embedding_file(&data_path, &meta, &samples).py_err()
}

#[pymodule]
fn fpcil(m: &Bound<'_, PyModule>) -> PyResult<()> {
    let py = m.py();
    m.add("FpcilError", py.get_type::<FpcilError>())?;
    m.add("ConfigError", py.get_type::<ConfigError>())?;
    m.add("ProtocolError", py.get_type::<ProtocolError>())?;
    m.add("NumericalError", py.get_type::<NumericalError>())?;
    m.add("DataError", py.get_type::<DataError>())?;
    m.add_class::<PyScenarioConfig>()?;
    m.add_class::<PyRunReport>()?;
    m.add_class::<PyStepAccuracy>()?;
    m.add_class::<PyHead>()?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(read_report, m)?)?;
    m.add_function(wrap_pyfunction!(build_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(average_incremental_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(build_future_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(parse_transcript, m)?)?;
    m.add_function(wrap_pyfunction!(tally_transcripts, m)?)?;
    m.add_function(wrap_pyfunction!(build_generation_prompt, m)?)?;
    m.add_function(wrap_pyfunction!(manifest_from_lexicon, m)?)?;
    m.add_function(wrap_pyfunction!(read_embeddings, m)?)?;
    m.add_function(wrap_pyfunction!(write_embeddings, m)?)?;
    Ok(())
}

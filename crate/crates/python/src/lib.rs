//! Python bindings. Images cross the boundary as a flat `list[float]` plus a
//! `[n, c, h, w]` shape; label matrices come back as lists of rows.

use hello_core::archive::ElementWidth;
use hello_core::config::PipelineConfig;
use hello_core::data::{toy_dataset as make_toy, Split, ToyConfig};
use hello_core::evalsuite::{partition_classes as partition, storage_report as report};
use hello_core::pipeline::{Pipeline as CorePipeline, RunOptions, Stage};
use hello_core::projector::Projector as CoreProjector;
use ndarray::Array4;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: hello_core::Error) -> PyErr {
    match e {
        hello_core::Error::Config(_) | hello_core::Error::Validation(_) | hello_core::Error::Shape(_) => {
            PyValueError::new_err(e.to_string())
        }
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn stage(name: &str) -> PyResult<Stage> {
    Stage::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown stage {name:?}")))
}

fn images(pixels: Vec<f64>, shape: [usize; 4]) -> PyResult<Array4<f64>> {
    Array4::from_shape_vec(shape, pixels).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Config", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: PipelineConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    fn new() -> Self {
        Self {
            inner: PipelineConfig::default(),
        }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let inner = PipelineConfig::from_toml_str(text).map_err(err)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: PipelineConfig::load(path).map_err(err)?,
        })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(err)
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    #[getter]
    fn output_dir(&self) -> String {
        self.inner.output_dir.display().to_string()
    }

    #[setter]
    fn set_output_dir(&mut self, dir: String) {
        self.inner.output_dir = dir.into();
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.hyper.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.hyper.seed = seed;
    }

    #[getter]
    fn epochs_k(&self) -> usize {
        self.inner.hyper.epochs_k
    }

    #[setter]
    fn set_epochs_k(&mut self, k: usize) {
        self.inner.hyper.epochs_k = k;
    }

    #[getter]
    fn teacher_window(&self) -> (usize, usize) {
        self.inner.teachers.window
    }

    #[setter]
    fn set_teacher_window(&mut self, w: (usize, usize)) {
        self.inner.teachers.window = w;
    }

    fn __repr__(&self) -> String {
        format!("Config(output_dir={:?}, seed={})", self.inner.output_dir, self.inner.hyper.seed)
    }
}

#[pyclass(name = "Pipeline", unsendable)]
struct PyPipeline {
    inner: CorePipeline,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (config, resume = false, force = false))]
    fn new(config: &PyConfig, resume: bool, force: bool) -> PyResult<Self> {
        let inner = CorePipeline::new(config.inner.clone(), RunOptions { resume, force }).map_err(err)?;
        Ok(Self { inner })
    }

    /// Runs every enabled stage; returns `(stage, ran)` pairs.
    fn run_all(&mut self) -> PyResult<Vec<(String, bool)>> {
        let ran = self.inner.run_all().map_err(err)?;
        Ok(ran.into_iter().map(|(s, r)| (s.name().to_string(), r)).collect())
    }

    fn run_stage(&mut self, name: &str) -> PyResult<()> {
        self.inner.run_stage(stage(name)?).map_err(err)
    }

    fn is_current(&self, name: &str) -> PyResult<bool> {
        Ok(self.inner.is_current(stage(name)?))
    }

    fn stage_hash(&self, name: &str) -> PyResult<String> {
        Ok(self.inner.hash(stage(name)?).to_string())
    }

    fn projector(&self) -> PyResult<PyProjector> {
        Ok(PyProjector {
            inner: self.inner.load_projector().map_err(err)?,
        })
    }

    #[staticmethod]
    fn stages() -> Vec<String> {
        Stage::ALL.iter().map(|s| s.name().to_string()).collect()
    }
}

#[pyclass(name = "Projector", unsendable)]
struct PyProjector {
    inner: CoreProjector,
}

#[pymethods]
impl PyProjector {
    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.meta.class_names.clone()
    }

    #[getter]
    fn input_shape(&self) -> [usize; 3] {
        self.inner.input_shape()
    }

    /// Stored adapter parameters.
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn adapter_targets(&self) -> Vec<String> {
        self.inner.adapters().iter().map(|a| a.target.clone()).collect()
    }

    /// Raw logits.
    fn forward(&self, pixels: Vec<f64>, shape: [usize; 4]) -> PyResult<Vec<Vec<f64>>> {
        let x = images(pixels, shape)?;
        let z = self.inner.forward(x.view()).map_err(err)?;
        Ok(z.outer_iter().map(|r| r.to_vec()).collect())
    }

    /// Soft labels in the configured output space.
    fn labels(&self, pixels: Vec<f64>, shape: [usize; 4]) -> PyResult<Vec<Vec<f64>>> {
        let x = images(pixels, shape)?;
        let y = self.inner.labels(x.view()).map_err(err)?;
        Ok(y.outer_iter().map(|r| r.to_vec()).collect())
    }

    /// A copy with the adapters folded into the base weights.
    fn merge(&self) -> PyResult<PyProjector> {
        Ok(PyProjector {
            inner: self.inner.merge().map_err(err)?,
        })
    }
}

/// Procedural toy set: `(pixels, shape, labels, class_names)`.
#[pyfunction]
#[pyo3(signature = (classes = 10, per_class = 10, size = 32, label_noise = 0.0, test = false, seed = 0))]
#[allow(clippy::type_complexity)]
fn toy_dataset(
    classes: usize,
    per_class: usize,
    size: usize,
    label_noise: f64,
    test: bool,
    seed: u64,
) -> PyResult<(Vec<f64>, [usize; 4], Vec<usize>, Vec<String>)> {
    let cfg = ToyConfig {
        classes,
        per_class,
        size,
        label_noise,
    };
    let split = if test { Split::Test } else { Split::Train };
    let d = make_toy(&cfg, split, seed).map_err(err)?;
    let (n, c, h, w) = d.images.dim();
    Ok((d.images.iter().copied().collect(), [n, c, h, w], d.labels, d.class_names))
}

/// Label-storage arithmetic as a dict.
#[pyfunction]
#[pyo3(signature = (epochs_k, n_synthetic, classes, width = 4, ipc = 0))]
fn storage_report<'py>(
    py: Python<'py>,
    epochs_k: u64,
    n_synthetic: u64,
    classes: u64,
    width: u64,
    ipc: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let w = ElementWidth::from_bytes(width).map_err(err)?;
    let r = report(epochs_k, n_synthetic, classes, w, ipc, None, None).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("soft_label_bytes", r.soft_label_bytes)?;
    d.set_item("soft_label_mib", r.soft_label_mib())?;
    d.set_item("projector_bytes", r.projector_bytes)?;
    d.set_item("ratio", r.ratio)?;
    Ok(d)
}

#[pyfunction]
fn partition_classes(classes: usize, steps: usize) -> PyResult<Vec<Vec<usize>>> {
    partition(classes, steps).map_err(err)
}

#[pymodule]
fn hello_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyPipeline>()?;
    m.add_class::<PyProjector>()?;
    m.add_function(wrap_pyfunction!(toy_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(storage_report, m)?)?;
    m.add_function(wrap_pyfunction!(partition_classes, m)?)?;
    Ok(())
}

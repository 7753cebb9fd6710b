//! Python bindings: scene I/O, the Haar transform, synthetic scenes,
//! training, evaluation and map prediction.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use wavemamba_core::hsi_io::{self, HsiCube, LabelMap};
use wavemamba_core::metrics::ConfusionMatrix;
use wavemamba_core::model::ModelParams;
use wavemamba_core::synthetic::{self, SceneSpec};
use wavemamba_core::train::{self, TrainConfig, TrainHistory};
use wavemamba_core::wavelet::{self, Plane, Subbands2D};
use wavemamba_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::IoFailure { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py_json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "Cube", frozen)]
struct PyCube(HsiCube);

#[pymethods]
impl PyCube {
    #[new]
    fn new(height: usize, width: usize, bands: usize, data: Vec<f64>) -> PyResult<Self> {
        HsiCube::new(height, width, bands, data).map(Self).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.0.height(), self.0.width(), self.0.bands())
    }

    /// Flat band-interleaved values.
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn pixel(&self, row: usize, col: usize) -> PyResult<Vec<f64>> {
        if row >= self.0.height() || col >= self.0.width() {
            return Err(PyValueError::new_err(format!("pixel ({row}, {col}) out of range")));
        }
        Ok(self.0.pixel(row, col).to_vec())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        hsi_io::write_cube(&self.0, path).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Cube({}x{}x{})", self.0.height(), self.0.width(), self.0.bands())
    }
}

#[pyclass(name = "Labels", frozen)]
struct PyLabels(LabelMap);

#[pymethods]
impl PyLabels {
    #[new]
    fn new(height: usize, width: usize, labels: Vec<u16>) -> PyResult<Self> {
        LabelMap::new(height, width, labels).map(Self).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.0.height(), self.0.width())
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn labels(&self) -> Vec<u16> {
        self.0.labels().to_vec()
    }

    fn histogram(&self) -> Vec<usize> {
        self.0.histogram()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        hsi_io::write_labels(&self.0, path).map_err(py_err)
    }

    /// Writes a P6 PPM with the default palette.
    fn render(&self, path: PathBuf) -> PyResult<()> {
        let palette = hsi_io::Palette::default_for(self.0.num_classes());
        hsi_io::render_map(&self.0, &palette, path).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Labels({}x{}, K={})", self.0.height(), self.0.width(), self.0.num_classes())
    }
}

#[pyfunction]
fn load_cube(path: PathBuf) -> PyResult<PyCube> {
    hsi_io::load_cube(path).map(PyCube).map_err(py_err)
}

#[pyfunction]
fn load_labels(path: PathBuf) -> PyResult<PyLabels> {
    hsi_io::load_labels(path).map(PyLabels).map_err(py_err)
}

fn plane(rows: Vec<Vec<f64>>) -> PyResult<Plane> {
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(PyValueError::new_err("rows must have equal length"));
    }
    Ok(Plane::from_rows(&rows))
}

fn nested(p: &Plane) -> Vec<Vec<f64>> {
    p.data.chunks(p.cols).map(<[f64]>::to_vec).collect()
}

/// Single-level 2-D Haar transform; returns `(ll, lh, hl, hh)`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn dwt2_haar(rows: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let s = wavelet::dwt2_haar(&plane(rows)?).map_err(py_err)?;
    Ok((nested(&s.ll), nested(&s.lh), nested(&s.hl), nested(&s.hh)))
}

#[pyfunction]
fn idwt2_haar(
    ll: Vec<Vec<f64>>,
    lh: Vec<Vec<f64>>,
    hl: Vec<Vec<f64>>,
    hh: Vec<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let sub = Subbands2D {
        ll: plane(ll)?,
        lh: plane(lh)?,
        hl: plane(hl)?,
        hh: plane(hh)?,
    };
    Ok(nested(&wavelet::idwt2_haar(&sub).map_err(py_err)?))
}

#[pyfunction]
#[pyo3(signature = (height=64, width=64, bands=16, classes=4, texture_scale=1.0, noise=0.3, seed=3407))]
fn make_synthetic(
    height: usize,
    width: usize,
    bands: usize,
    classes: usize,
    texture_scale: f64,
    noise: f64,
    seed: u64,
) -> PyResult<(PyCube, PyLabels)> {
    let spec = SceneSpec {
        height,
        width,
        bands,
        classes,
        texture_scale,
        noise,
        seed,
        ..SceneSpec::default()
    };
    let (cube, labels) = synthetic::make_synthetic(&spec).map_err(py_err)?;
    Ok((PyCube(cube), PyLabels(labels)))
}

/// OA, AA, kappa and per-class recall of a confusion matrix (rows are truth).
#[pyfunction]
fn confusion_metrics<'py>(py: Python<'py>, rows: Vec<Vec<u64>>) -> PyResult<Bound<'py, PyAny>> {
    let cm = ConfusionMatrix::from_rows(&rows).map_err(py_err)?;
    let report = wavemamba_core::metrics::MetricsReport::from_confusion(&cm, 0.0, serde_json::Value::Null)
        .map_err(py_err)?;
    to_py_json(py, &report)
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    params: ModelParams,
    config: TrainConfig,
    history: Option<TrainHistory>,
}

fn parse_config(config: Option<&str>, labels: &LabelMap) -> PyResult<TrainConfig> {
    let mut cfg: TrainConfig = match config {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => TrainConfig::default(),
    };
    cfg.model.num_classes = labels.num_classes();
    Ok(cfg)
}

#[pymethods]
impl PyModel {
    /// Trains on a scene. `config` is a JSON string with TrainConfig fields.
    #[staticmethod]
    #[pyo3(signature = (cube, labels, config=None))]
    fn train(py: Python<'_>, cube: &PyCube, labels: &PyLabels, config: Option<&str>) -> PyResult<Self> {
        let cfg = parse_config(config, &labels.0)?;
        let (cube, labels) = (&cube.0, &labels.0);
        let (params, history) = py
            .detach(|| {
                let data = train::prepare(cube, labels, &cfg)?;
                train::train(&data, &cfg)
            })
            .map_err(py_err)?;
        Ok(Self {
            params,
            config: cfg,
            history: Some(history),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, config) = train::load_model(path).map_err(py_err)?;
        Ok(Self {
            params,
            config,
            history: None,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        train::save_model(&self.params, &self.config, path).map_err(py_err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py_json(py, &self.config)
    }

    /// Per-epoch statistics of the training run, `None` for loaded models.
    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.history.as_ref().map(|h| to_py_json(py, h)).transpose()
    }

    /// Metrics report for `split` ("train", "val", "test" or "all").
    #[pyo3(signature = (cube, labels, split="test"))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        cube: &PyCube,
        labels: &PyLabels,
        split: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let data = train::prepare(&cube.0, &labels.0, &self.config).map_err(py_err)?;
        let idx = match split {
            "train" => data.split.train.clone(),
            "val" => data.split.validation.clone(),
            "test" => data.split.test.clone(),
            "all" => (0..data.patches.len()).collect(),
            other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        };
        let time = self.history.as_ref().map_or(0.0, |h| h.wall_clock_s);
        let report = py
            .detach(|| train::evaluate(&self.params, &data, &idx, &self.config, time))
            .map_err(py_err)?;
        to_py_json(py, &report)
    }

    fn predict_map(&self, py: Python<'_>, cube: &PyCube) -> PyResult<PyLabels> {
        let map = py
            .detach(|| {
                let (reduced, _) = train::preprocess_cube(&cube.0, &self.config)?;
                train::predict_map(&self.params, &reduced, &self.config.model_config())
            })
            .map_err(py_err)?;
        Ok(PyLabels(map))
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.params.count()
    }
}

#[pymodule]
fn wavemamba(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCube>()?;
    m.add_class::<PyLabels>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(load_cube, m)?)?;
    m.add_function(wrap_pyfunction!(load_labels, m)?)?;
    m.add_function(wrap_pyfunction!(dwt2_haar, m)?)?;
    m.add_function(wrap_pyfunction!(idwt2_haar, m)?)?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(confusion_metrics, m)?)?;
    Ok(())
}

//! Python bindings: image planes, the per-image solver, metrics and haze transfer.

use hazesplit_core::image as img;
use hazesplit_core::metrics;
use hazesplit_core::physics::{self, Disentanglement, HINT_PATCH, HINT_TOP_FRACTION};
use hazesplit_core::solver::{self, RunRecord, SolverConfig};
use hazesplit_core::transfer::{self, Resize};
use hazesplit_core::Error;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Format { .. } => PyIOError::new_err(e.to_string()),
        Error::InvalidArgument { .. } | Error::ShapeMismatch { .. } => PyValueError::new_err(e.to_string()),
        _ => PyArithmeticError::new_err(e.to_string()),
    }
}

/// Planar float image, channel-major, values in [0, 1].
#[pyclass(name = "ImagePlane", module = "hazesplit")]
#[derive(Clone)]
pub struct PyImagePlane {
    inner: img::ImagePlane,
}

impl From<img::ImagePlane> for PyImagePlane {
    fn from(inner: img::ImagePlane) -> Self {
        PyImagePlane { inner }
    }
}

#[pymethods]
impl PyImagePlane {
    /// Builds a plane from channel-major data of length channels*height*width.
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        img::ImagePlane::new(height, width, channels, data).map(Into::into).map_err(to_py)
    }

    /// Builds a plane from pixel-interleaved data (HWC order).
    #[staticmethod]
    fn from_interleaved(height: usize, width: usize, channels: usize, data: Vec<f64>) -> PyResult<Self> {
        img::ImagePlane::from_interleaved(height, width, channels, &data).map(Into::into).map_err(to_py)
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
    fn channels(&self) -> usize {
        self.inner.channels()
    }

    /// Channel-major values as a flat list.
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    /// Pixel-interleaved values as a flat list.
    fn to_interleaved(&self) -> Vec<f64> {
        self.inner.to_interleaved()
    }

    fn save_png(&self, path: &str) -> PyResult<()> {
        img::save_png8(&self.inner, path).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("ImagePlane(height={}, width={}, channels={})", self.inner.height(), self.inner.width(), self.inner.channels())
    }
}

/// Radiance, transmission and airlight recovered from one image.
#[pyclass(name = "Layers", module = "hazesplit")]
pub struct PyLayers {
    inner: Disentanglement,
}

#[pymethods]
impl PyLayers {
    #[getter]
    fn radiance(&self) -> PyImagePlane {
        self.inner.radiance.clone().into()
    }

    #[getter]
    fn transmission(&self) -> PyImagePlane {
        self.inner.transmission.clone().into()
    }

    #[getter]
    fn airlight(&self) -> PyImagePlane {
        self.inner.airlight.clone().into()
    }

    /// Re-synthesizes the hazy image from the layers.
    fn recompose(&self) -> PyResult<PyImagePlane> {
        self.inner.recompose().map(Into::into).map_err(to_py)
    }
}

/// Transmission and airlight of a hazy source, reusable on clean images.
#[pyclass(name = "HazeStyle", module = "hazesplit")]
pub struct PyHazeStyle {
    inner: transfer::HazeStyle,
}

#[pymethods]
impl PyHazeStyle {
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        transfer::HazeStyle::load(dir).map(|inner| PyHazeStyle { inner }).map_err(to_py)
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.inner.save(dir).map_err(to_py)
    }

    #[getter]
    fn source_dims(&self) -> (usize, usize) {
        self.inner.source_dims
    }

    #[getter]
    fn transmission(&self) -> PyImagePlane {
        self.inner.transmission.clone().into()
    }

    #[getter]
    fn airlight(&self) -> PyImagePlane {
        self.inner.airlight.clone().into()
    }
}

fn config(epochs: usize, lr: f64, lambda_reg: f64, seed: u64) -> SolverConfig {
    let mut cfg = SolverConfig {
        epochs,
        learning_rate: lr,
        seed,
        ..SolverConfig::default()
    };
    cfg.loss.lambda_reg = lambda_reg;
    cfg
}

fn record_dict<'py>(py: Python<'py>, record: &RunRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("seed", record.seed)?;
    d.set_item("precision", &record.precision)?;
    d.set_item("hint", record.hint.to_vec())?;
    let keys = ["rec", "j", "h", "kl", "reg", "total"];
    for (i, key) in keys.iter().enumerate() {
        let series: Vec<f64> = record
            .losses
            .iter()
            .map(|l| [l.rec, l.j, l.h, l.kl, l.reg, l.total][i])
            .collect();
        d.set_item(*key, series)?;
    }
    d.set_item("epoch_ms", record.epoch_ms.clone())?;
    Ok(d)
}

fn run<F, R>(py: Python<'_>, precision: &str, f32_run: F, f64_run: impl FnOnce() -> R + Send) -> PyResult<R>
where
    F: FnOnce() -> R + Send,
    R: Send,
{
    match precision {
        "f32" => Ok(py.allow_threads(f32_run)),
        "f64" => Ok(py.allow_threads(f64_run)),
        other => Err(PyValueError::new_err(format!("precision must be f32 or f64, got {other}"))),
    }
}

#[pyfunction]
fn load_image(path: &str) -> PyResult<PyImagePlane> {
    img::load_image(path).map(Into::into).map_err(to_py)
}

#[pyfunction]
fn psnr(a: &PyImagePlane, b: &PyImagePlane) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
fn ssim(a: &PyImagePlane, b: &PyImagePlane) -> PyResult<f64> {
    metrics::ssim(&a.inner, &b.inner).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (hazy, patch = HINT_PATCH, top_fraction = HINT_TOP_FRACTION))]
fn estimate_airlight_hint(hazy: &PyImagePlane, patch: usize, top_fraction: f64) -> PyResult<(f64, f64, f64)> {
    let [r, g, b] = physics::estimate_airlight_hint(&hazy.inner, patch, top_fraction).map_err(to_py)?;
    Ok((r, g, b))
}

/// Splits a hazy image into layers; returns `(Layers, record)`.
#[pyfunction]
#[pyo3(signature = (hazy, epochs = 500, lr = 1e-3, lambda_reg = 0.1, seed = 0, precision = "f32"))]
fn dehaze<'py>(
    py: Python<'py>,
    hazy: &PyImagePlane,
    epochs: usize,
    lr: f64,
    lambda_reg: f64,
    seed: u64,
    precision: &str,
) -> PyResult<(PyLayers, Bound<'py, PyDict>)> {
    let cfg = config(epochs, lr, lambda_reg, seed);
    let image = &hazy.inner;
    let (layers, record) = run(
        py,
        precision,
        || solver::dehaze::<f32>(image, &cfg),
        || solver::dehaze::<f64>(image, &cfg),
    )?
    .map_err(to_py)?;
    Ok((PyLayers { inner: layers }, record_dict(py, &record)?))
}

/// Extracts a haze style from a hazy image; returns `(HazeStyle, record)`.
#[pyfunction]
#[pyo3(signature = (hazy, epochs = 500, lr = 1e-3, lambda_reg = 0.1, seed = 0, precision = "f32"))]
fn extract_style<'py>(
    py: Python<'py>,
    hazy: &PyImagePlane,
    epochs: usize,
    lr: f64,
    lambda_reg: f64,
    seed: u64,
    precision: &str,
) -> PyResult<(PyHazeStyle, Bound<'py, PyDict>)> {
    let cfg = config(epochs, lr, lambda_reg, seed);
    let image = &hazy.inner;
    let (style, record) = run(
        py,
        precision,
        || transfer::extract_style::<f32>(image, &cfg),
        || transfer::extract_style::<f64>(image, &cfg),
    )?
    .map_err(to_py)?;
    Ok((PyHazeStyle { inner: style }, record_dict(py, &record)?))
}

/// Renders `clean` through a style's transmission and airlight.
#[pyfunction]
fn apply_style(clean: &PyImagePlane, style: &PyHazeStyle) -> PyResult<PyImagePlane> {
    transfer::apply_style(&clean.inner, &style.inner, Resize::Bilinear).map(Into::into).map_err(to_py)
}

/// Composes `J*T + A*(1-T)` from explicit planes.
#[pyfunction]
fn compose(radiance: &PyImagePlane, transmission: &PyImagePlane, airlight: &PyImagePlane) -> PyResult<PyImagePlane> {
    physics::compose_planes(&radiance.inner, &transmission.inner, &airlight.inner).map(Into::into).map_err(to_py)
}

#[pymodule]
fn hazesplit(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImagePlane>()?;
    m.add_class::<PyLayers>()?;
    m.add_class::<PyHazeStyle>()?;
    m.add_function(wrap_pyfunction!(load_image, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_airlight_hint, m)?)?;
    m.add_function(wrap_pyfunction!(dehaze, m)?)?;
    m.add_function(wrap_pyfunction!(extract_style, m)?)?;
    m.add_function(wrap_pyfunction!(apply_style, m)?)?;
    m.add_function(wrap_pyfunction!(compose, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}

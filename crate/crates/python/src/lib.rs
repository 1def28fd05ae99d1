//! Python bindings for hsid-core.
//!
//! Cubes cross the boundary as float64 arrays shaped `(bands, height, width)`,
//! which is the core's band-sequential layout, so conversion is a single copy.

use numpy::ndarray::Array3;
use numpy::{IntoPyArray, PyArray3, PyReadonlyArray3};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hsid_core::checkpoint::{load_checkpoint, save_checkpoint};
use hsid_core::cube::{load_cube, save_cube, HsiCube, Rect};
use hsid_core::error::HsidError;
use hsid_core::gradcheck::{network_gradcheck, GradcheckOptions};
use hsid_core::inference::{denoise_cube_with, Tiling};
use hsid_core::metrics;
use hsid_core::model::{init_params, ArchitectureSpec, ModelParams};
use hsid_core::noise::{self, NoiseSpec};
use hsid_core::pipeline::extract_patches;
use hsid_core::synth::{synthesize as synth_scene, SceneSpec};
use hsid_core::trainer::{train as train_model, OptimizerConfig, TrainConfig};

fn to_py(e: HsidError) -> PyErr {
    match e {
        HsidError::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_input_error() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Hyperspectral cube held in double precision.
#[pyclass(name = "Cube", module = "hsid")]
#[derive(Clone)]
pub struct PyCube {
    inner: HsiCube,
}

#[pymethods]
impl PyCube {
    /// Builds a cube from a `(bands, height, width)` array.
    #[new]
    fn new(array: PyReadonlyArray3<'_, f64>) -> PyResult<Self> {
        let view = array.as_array();
        let (b, h, w) = view.dim();
        let data: Vec<f64> = view.iter().copied().collect();
        Ok(PyCube { inner: HsiCube::new(w, h, b, data).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyCube { inner: load_cube(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_cube(&self.inner, path).map_err(to_py)
    }

    fn to_numpy<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let c = &self.inner;
        let arr = Array3::from_shape_vec((c.bands(), c.height(), c.width()), c.data().to_vec())
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(arr.into_pyarray(py))
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn bands(&self) -> usize {
        self.inner.bands()
    }

    /// Per-band min-max scaling to `[0, 1]`.
    fn normalize_bands(&self) -> Self {
        PyCube { inner: self.inner.normalize_bands().0 }
    }

    fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> PyResult<Self> {
        Ok(PyCube { inner: self.inner.crop(Rect::new(x, y, width, height)).map_err(to_py)? })
    }

    fn __repr__(&self) -> String {
        format!("Cube(width={}, height={}, bands={})", self.inner.width(), self.inner.height(), self.inner.bands())
    }
}

/// Network configuration; `k` is the number of adjacent bands.
#[pyclass(name = "Architecture", module = "hsid")]
#[derive(Clone)]
pub struct PyArchitecture {
    inner: ArchitectureSpec,
}

#[pymethods]
impl PyArchitecture {
    #[new]
    #[pyo3(signature = (k = 24, multi_scale = true, multi_level = true))]
    fn new(k: usize, multi_scale: bool, multi_level: bool) -> PyResult<Self> {
        let inner = ArchitectureSpec::default()
            .with_adjacent_bands(k)
            .with_multi_scale(multi_scale)
            .with_multi_level(multi_level);
        inner.validate().map_err(to_py)?;
        Ok(PyArchitecture { inner })
    }

    #[getter]
    fn k(&self) -> usize {
        self.inner.adjacent_bands
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn receptive_radius(&self) -> usize {
        self.inner.receptive_radius()
    }

    fn __repr__(&self) -> String {
        format!("Architecture(k={}, params={})", self.inner.adjacent_bands, self.inner.param_count())
    }
}

/// Trained or initialised network weights, stored in single precision.
#[pyclass(name = "Model", module = "hsid")]
pub struct PyModel {
    spec: ArchitectureSpec,
    params: ModelParams<f32>,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (architecture, seed = 0))]
    fn init(architecture: &PyArchitecture, seed: u64) -> Self {
        PyModel { spec: architecture.inner.clone(), params: init_params(&architecture.inner, seed) }
    }

    /// All-zero weights; denoising with them is the identity.
    #[staticmethod]
    fn zeros(architecture: &PyArchitecture) -> Self {
        PyModel { spec: architecture.inner.clone(), params: ModelParams::zeros(&architecture.inner) }
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = load_checkpoint(path, None).map_err(to_py)?;
        Ok(PyModel { spec: ckpt.spec, params: ckpt.params })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(path, &self.spec, &self.params, None).map_err(to_py)
    }

    #[getter]
    fn architecture(&self) -> PyArchitecture {
        PyArchitecture { inner: self.spec.clone() }
    }

    /// `{name: shape}` for every parameter tensor.
    fn tensor_shapes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (name, t) in self.params.named_tensors() {
            d.set_item(name, t.shape().to_vec())?;
        }
        Ok(d)
    }

    /// Denoises every band in double precision, optionally in overlapping tiles.
    #[pyo3(signature = (cube, tile = None, overlap = None))]
    fn denoise(&self, py: Python<'_>, cube: &PyCube, tile: Option<usize>, overlap: Option<usize>) -> PyResult<PyCube> {
        let tiling = tile.map(|tile| Tiling { tile, overlap: overlap.unwrap_or(self.spec.receptive_radius()) });
        let params: ModelParams<f64> = self.params.cast();
        let input = &cube.inner;
        let out = py.detach(|| denoise_cube_with(input, &params, &self.spec, tiling)).map_err(to_py)?;
        Ok(PyCube { inner: out })
    }
}

fn noise_spec(case: &str, sigma: f64, sigma_max: f64, beta: f64, eta: f64, seed: u64) -> PyResult<NoiseSpec> {
    match case {
        "fixed" => Ok(NoiseSpec::fixed(sigma, seed)),
        "uniform" => Ok(NoiseSpec::uniform(sigma_max, seed)),
        "gaussian_curve" => Ok(NoiseSpec::gaussian_curve(beta, eta, seed)),
        other => Err(PyValueError::new_err(format!("unknown noise case {other:?}"))),
    }
}

/// Adds zero-mean Gaussian noise per band; sigmas are on the 0..255 scale.
#[pyfunction]
#[pyo3(signature = (cube, case = "fixed", sigma = 25.0, sigma_max = 25.0, beta = 200.0, eta = 30.0, seed = 1))]
fn add_noise(cube: &PyCube, case: &str, sigma: f64, sigma_max: f64, beta: f64, eta: f64, seed: u64) -> PyResult<PyCube> {
    let spec = noise_spec(case, sigma, sigma_max, beta, eta, seed)?;
    Ok(PyCube { inner: noise::add_noise(&cube.inner, &spec).map_err(to_py)? })
}

/// Per-band sigma (0..255 scale) that `add_noise` would use.
#[pyfunction]
#[pyo3(signature = (bands, case = "fixed", sigma = 25.0, sigma_max = 25.0, beta = 200.0, eta = 30.0, seed = 1))]
fn sigma_profile(bands: usize, case: &str, sigma: f64, sigma_max: f64, beta: f64, eta: f64, seed: u64) -> PyResult<Vec<f64>> {
    noise_spec(case, sigma, sigma_max, beta, eta, seed)?.sigma_profile(bands).map_err(to_py)
}

/// Synthetic normalised scene: smooth endmember mixtures with sharp shapes.
#[pyfunction]
#[pyo3(signature = (width, height, bands, seed = 0))]
fn synthesize(width: usize, height: usize, bands: usize, seed: u64) -> PyResult<PyCube> {
    Ok(PyCube { inner: synth_scene(&SceneSpec::new(width, height, bands, seed)).map_err(to_py)? })
}

/// Trains on patches cut from a (noisy, clean) pair and returns the model
/// with its per-iteration loss trace.
#[pyfunction]
#[pyo3(signature = (noisy, clean, architecture, iterations, batch_size = 16, patch = 20, stride = 20, alpha = 0.001, seed = 2))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    noisy: &PyCube,
    clean: &PyCube,
    architecture: &PyArchitecture,
    iterations: u64,
    batch_size: usize,
    patch: usize,
    stride: usize,
    alpha: f64,
    seed: u64,
) -> PyResult<(PyModel, Vec<f64>)> {
    let spec = architecture.inner.clone();
    let (noisy, clean) = (&noisy.inner, &clean.inner);
    let out = py
        .detach(|| {
            let data = extract_patches::<f32>(noisy, clean, patch, stride, spec.adjacent_bands)?;
            let cfg = TrainConfig {
                epochs: usize::MAX,
                batch_size,
                init_seed: seed,
                shuffle_seed: seed.wrapping_add(1),
                max_iterations: Some(iterations),
                ..Default::default()
            };
            train_model(&data, &spec, &cfg, &OptimizerConfig { alpha, ..Default::default() })
        })
        .map_err(to_py)?;
    let losses = out.trace.losses();
    Ok((PyModel { spec, params: out.params }, losses))
}

/// MPSNR / MSSIM / MSA plus per-band PSNR and SSIM of `test` against `reference`.
#[pyfunction]
fn report<'py>(py: Python<'py>, reference: &PyCube, test: &PyCube) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::report(&reference.inner, &test.inner).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("mpsnr", r.mpsnr)?;
    d.set_item("mssim", r.mssim)?;
    d.set_item("msa", r.msa)?;
    d.set_item("msa_skipped", r.msa_skipped)?;
    d.set_item("per_band_psnr", r.per_band_psnr)?;
    d.set_item("per_band_ssim", r.per_band_ssim)?;
    Ok(d)
}

/// Worst relative error between analytic and finite-difference gradients.
#[pyfunction]
#[pyo3(signature = (k = 4, patch = 8, samples = 96, seed = 0))]
fn gradcheck(py: Python<'_>, k: usize, patch: usize, samples: usize, seed: u64) -> PyResult<f64> {
    let opts = GradcheckOptions {
        spec: ArchitectureSpec::default().with_adjacent_bands(k),
        patch,
        samples_per_tensor: samples,
        seed,
        ..Default::default()
    };
    Ok(py.detach(|| network_gradcheck(&opts)).map_err(to_py)?.max_error())
}

#[pymodule]
fn hsid(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCube>()?;
    m.add_class::<PyArchitecture>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(add_noise, m)?)?;
    m.add_function(wrap_pyfunction!(sigma_profile, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

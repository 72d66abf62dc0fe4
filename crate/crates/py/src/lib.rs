//! Python bindings for the `mscdt` crate.
//!
//! Images cross the boundary as flat row-major lists of floats plus a shape.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mscdt::evaluation::{self, MetricsRow, PhantomPair, PhantomSpec};
use mscdt::numerics::{DType, Real};
use mscdt::pipeline::{self, StepLosses, TrainConfig, Trainer};
use mscdt::texture::{self, TextureConfig};

fn err(e: mscdt::Error) -> PyErr {
    match e {
        mscdt::Error::Io { .. } | mscdt::Error::Checkpoint(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Grayscale image in row-major order.
#[pyclass(name = "Image", module = "mscdt_py")]
#[derive(Clone)]
struct PyImage {
    inner: mscdt::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        if data.len() != height * width {
            return Err(PyValueError::new_err(format!(
                "{} values for a {height}x{width} image",
                data.len()
            )));
        }
        let inner = mscdt::Image::from_fn(height, width, |y, x| data[y * width + x]);
        Ok(Self { inner })
    }

    #[staticmethod]
    fn zeros(height: usize, width: usize) -> Self {
        Self {
            inner: mscdt::Image::zeros(height, width),
        }
    }

    /// Reads a `.tsr` or `.pgm` file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: mscdt::Image::load(path).map_err(err)?,
        })
    }

    fn save_tsr(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save_tsr(path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.dims()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn get(&self, y: usize, x: usize) -> PyResult<f64> {
        let (h, w) = self.inner.dims();
        if y >= h || x >= w {
            return Err(PyValueError::new_err(format!("({y}, {x}) outside {h}x{w}")));
        }
        Ok(self.inner.get(y, x))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.dims();
        format!("Image({h}x{w})")
    }
}

fn wrap(images: &[mscdt::Image]) -> Vec<PyImage> {
    images
        .iter()
        .map(|i| PyImage { inner: i.clone() })
        .collect()
}

fn unwrap(images: &[PyImage]) -> Vec<mscdt::Image> {
    images.iter().map(|i| i.inner.clone()).collect()
}

/// Synthetic dual-tracer phantom with ground truth.
#[pyclass(name = "Phantom", module = "mscdt_py")]
#[derive(Clone)]
struct PyPhantom {
    inner: PhantomPair,
}

#[pymethods]
impl PyPhantom {
    #[getter]
    fn dual(&self) -> PyImage {
        PyImage {
            inner: self.inner.dual.clone(),
        }
    }

    #[getter]
    fn singles(&self) -> Vec<PyImage> {
        wrap(&self.inner.singles)
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Pixel mask (0/1, row-major) of `name` ("lesion" or "background").
    fn region(&self, tracer: usize, name: &str) -> PyResult<Vec<u8>> {
        let r = self.inner.region(tracer, name).map_err(err)?;
        Ok(r.bits.iter().map(|&b| b as u8).collect())
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.dual.dims();
        format!(
            "Phantom(seed={}, {h}x{w}, tracers={})",
            self.inner.seed,
            self.inner.singles.len()
        )
    }
}

fn spec(size: usize) -> PhantomSpec {
    PhantomSpec {
        size,
        ..PhantomSpec::default()
    }
}

#[pyfunction]
#[pyo3(signature = (seed, size = 32))]
fn gen_phantom(seed: u64, size: usize) -> PyResult<PyPhantom> {
    let inner = evaluation::gen_phantom(seed, &spec(size)).map_err(err)?;
    Ok(PyPhantom { inner })
}

#[pyfunction]
#[pyo3(signature = (seed, count, size = 32))]
fn gen_corpus(seed: u64, count: usize, size: usize) -> PyResult<Vec<PyPhantom>> {
    let pairs = evaluation::gen_corpus(seed, count, &spec(size)).map_err(err)?;
    Ok(pairs.into_iter().map(|inner| PyPhantom { inner }).collect())
}

/// Writes a phantom corpus directory in the CLI's layout.
#[pyfunction]
#[pyo3(signature = (out, seed, count, size = 32))]
fn write_corpus(out: PathBuf, seed: u64, count: usize, size: usize) -> PyResult<()> {
    evaluation::corpus::write_corpus(&out, seed, count, &spec(size)).map_err(err)?;
    Ok(())
}

/// Row-major LBP codes.
#[pyfunction]
fn lbp_map(image: &PyImage) -> PyResult<Vec<u8>> {
    Ok(texture::lbp_map(&image.inner).map_err(err)?.codes)
}

/// `(mask, masked_image)` for threshold `tau`.
#[pyfunction]
#[pyo3(signature = (image, tau = texture::DEFAULT_TAU))]
fn texture_condition(image: &PyImage, tau: u8) -> PyResult<(Vec<u8>, PyImage)> {
    let (mask, u) = texture::texture_condition(&image.inner, tau).map_err(err)?;
    Ok((mask.bits, PyImage { inner: u }))
}

#[pyfunction]
fn psnr(x: &PyImage, reference: &PyImage) -> PyResult<f64> {
    evaluation::psnr(&x.inner, &reference.inner).map_err(err)
}

#[pyfunction]
fn ssim(x: &PyImage, y: &PyImage) -> PyResult<f64> {
    evaluation::ssim_default(&x.inner, &y.inner).map_err(err)
}

#[pyfunction]
fn nrmse(x: &PyImage, y: &PyImage) -> PyResult<f64> {
    evaluation::nrmse(&x.inner, &y.inner).map_err(err)
}

fn row_dict<'py>(py: Python<'py>, r: &MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("phantom_id", &r.phantom_id)?;
    d.set_item("tracer", r.tracer)?;
    d.set_item("psnr_db", r.psnr_db)?;
    d.set_item("ssim", r.ssim)?;
    d.set_item("nrmse", r.nrmse)?;
    d.set_item("cr", r.cr)?;
    d.set_item("cov", r.cov)?;
    Ok(d)
}

/// One metrics dict per tracer.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    phantom_id: &str,
    predicted: Vec<PyImage>,
    truth: &PyPhantom,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let rows =
        evaluation::evaluate_pair(phantom_id, &unwrap(&predicted), &truth.inner).map_err(err)?;
    rows.iter().map(|r| row_dict(py, r)).collect()
}

fn losses_dict<'py>(py: Python<'py>, l: &StepLosses) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("step", l.step)?;
    d.set_item("total", l.total)?;
    d.set_item("dm", l.dm)?;
    d.set_item("tm", l.tm)?;
    Ok(d)
}

enum AnyTrainer {
    F32(Trainer<f32>),
    F64(Trainer<f64>),
}

macro_rules! with_trainer {
    ($t:expr, $v:ident => $body:expr) => {
        match $t {
            AnyTrainer::F32($v) => $body,
            AnyTrainer::F64($v) => $body,
        }
    };
}

/// Result of separating one dual-tracer image.
#[pyclass(name = "Separation", module = "mscdt_py", get_all)]
struct PySeparation {
    fused: Vec<PyImage>,
    raw: Vec<PyImage>,
    /// Row-major `latent_dim × tracers` prior.
    prior: Vec<f64>,
}

fn separation<T: Real>(
    trainer: &Trainer<T>,
    dual: &mscdt::Image,
    texture: &TextureConfig,
    seed: u64,
) -> mscdt::Result<PySeparation> {
    let s = pipeline::separate(dual, &trainer.model, texture, seed)?;
    Ok(PySeparation {
        fused: wrap(&s.fused),
        raw: wrap(&s.raw),
        prior: s.prior.flat().iter().map(|v| v.to_f64()).collect(),
    })
}

/// Model plus optimizer state.
#[pyclass(name = "Trainer", module = "mscdt_py", unsendable)]
struct PyTrainer {
    inner: AnyTrainer,
}

fn parse_precision(precision: &str) -> PyResult<DType> {
    match precision {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(PyValueError::new_err(format!(
            "precision must be f32 or f64, got {other}"
        ))),
    }
}

#[pymethods]
impl PyTrainer {
    /// `config` is a JSON training configuration; missing fields take defaults.
    #[new]
    #[pyo3(signature = (config = None, steps = None, seed = None, precision = "f32"))]
    fn new(
        config: Option<&str>,
        steps: Option<usize>,
        seed: Option<u64>,
        precision: &str,
    ) -> PyResult<Self> {
        let mut cfg: TrainConfig = match config {
            Some(json) => {
                serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))?
            }
            None => TrainConfig::default(),
        };
        if let Some(s) = steps {
            cfg.steps = s;
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let inner = match parse_precision(precision)? {
            DType::F32 => AnyTrainer::F32(Trainer::new(&cfg).map_err(err)?),
            DType::F64 => AnyTrainer::F64(Trainer::new(&cfg).map_err(err)?),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (dir, precision = None))]
    fn load(dir: PathBuf, precision: Option<&str>) -> PyResult<Self> {
        let dtype = match precision {
            Some(p) => parse_precision(p)?,
            None => {
                pipeline::checkpoint::read_manifest(&dir)
                    .map_err(err)?
                    .dtype
            }
        };
        let inner = match dtype {
            DType::F32 => AnyTrainer::F32(pipeline::load_checkpoint(&dir).map_err(err)?),
            DType::F64 => AnyTrainer::F64(pipeline::load_checkpoint(&dir).map_err(err)?),
        };
        Ok(Self { inner })
    }

    /// Writes a checkpoint directory; returns its manifest as JSON.
    fn save(&self, dir: PathBuf) -> PyResult<String> {
        let m = with_trainer!(&self.inner, t => pipeline::save_checkpoint(t, &dir)).map_err(err)?;
        serde_json::to_string(&m).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn step(&self) -> usize {
        with_trainer!(&self.inner, t => t.step)
    }

    #[getter]
    fn config(&self) -> PyResult<String> {
        let cfg = with_trainer!(&self.inner, t => &t.config);
        serde_json::to_string(cfg).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    #[getter]
    fn num_params(&self) -> usize {
        with_trainer!(&self.inner, t => t.model.store.num_scalars())
    }

    /// One optimizer update; returns the step's losses.
    fn train_step<'py>(
        &mut self,
        py: Python<'py>,
        data: Vec<PyPhantom>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let pairs: Vec<PhantomPair> = data.into_iter().map(|p| p.inner).collect();
        let l = with_trainer!(&mut self.inner, t => t.step(&pairs)).map_err(err)?;
        losses_dict(py, &l)
    }

    /// Trains to the configured step count; returns every step's losses.
    fn run<'py>(
        &mut self,
        py: Python<'py>,
        data: Vec<PyPhantom>,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let pairs: Vec<PhantomPair> = data.into_iter().map(|p| p.inner).collect();
        let mut out = Vec::new();
        with_trainer!(&mut self.inner, t => t.run(&pairs, |l| out.push(*l))).map_err(err)?;
        out.iter().map(|l| losses_dict(py, l)).collect()
    }

    #[pyo3(signature = (dual, tau = texture::DEFAULT_TAU, alpha = texture::DEFAULT_ALPHA, seed = 0))]
    fn separate(&self, dual: &PyImage, tau: u8, alpha: f64, seed: u64) -> PyResult<PySeparation> {
        let tex = TextureConfig { tau, alpha };
        with_trainer!(&self.inner, t => separation(t, &dual.inner, &tex, seed)).map_err(err)
    }
}

/// Runs the command-line interface with `args` (program name excluded) and
/// returns its exit code.
#[pyfunction]
fn cli(args: Vec<String>) -> i32 {
    let argv = std::iter::once("mscdt".to_string()).chain(args);
    mscdt::cli::dispatch(argv)
}

#[pymodule]
fn mscdt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyPhantom>()?;
    m.add_class::<PyTrainer>()?;
    m.add_class::<PySeparation>()?;
    m.add_function(wrap_pyfunction!(gen_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(write_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(lbp_map, m)?)?;
    m.add_function(wrap_pyfunction!(texture_condition, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(nrmse, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    m.add("DEFAULT_TAU", texture::DEFAULT_TAU)?;
    m.add("DEFAULT_ALPHA", texture::DEFAULT_ALPHA)?;
    Ok(())
}

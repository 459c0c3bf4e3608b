//! Python bindings. Images cross the boundary as flat row-major RGB lists
//! of floats in [0, 1]; masks as flat lists of per-pixel weights.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use shadoc::dataio::{self, ImageTensor, SynthConfig};
use shadoc::detection::{self, ShadowMask};
use shadoc::metrics::{self, ReportMeta};
use shadoc::pipeline::{self, Checkpoint, TrainConfig};
use shadoc::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        Error::Shape(_) | Error::Usage(_) | Error::Validation(_) | Error::Config(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn image(pixels: Vec<f64>, height: usize, width: usize) -> PyResult<ImageTensor> {
    ImageTensor::new(height, width, pixels).map_err(to_py)
}

fn mask(values: Vec<f64>, height: usize, width: usize) -> PyResult<ShadowMask> {
    ShadowMask::new(height, width, values).map_err(to_py)
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A trained two-stage model loaded from a checkpoint.
#[pyclass(module = "shadocnet", frozen)]
struct Model {
    inner: pipeline::Model<f32>,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Checkpoint::load(&path).and_then(|c| c.to_model()).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// Model architecture as a JSON string.
    #[getter]
    fn config(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(json_err)
    }

    /// Returns `(coarse, final, mask_used)`. Without `mask` the detector runs.
    #[pyo3(signature = (pixels, height, width, mask=None))]
    fn remove(
        &self,
        py: Python<'_>,
        pixels: Vec<f64>,
        height: usize,
        width: usize,
        mask: Option<Vec<f64>>,
    ) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let img = image(pixels, height, width)?;
        let m = mask.map(|v| self::mask(v, height, width)).transpose()?;
        let out = py.detach(|| self.inner.infer(&img, m.as_ref())).map_err(to_py)?;
        Ok((out.i1.data().to_vec(), out.i2.data().to_vec(), out.mask_used.data().to_vec()))
    }

    /// Read `input`, write the final stage to `output`.
    #[pyo3(signature = (input, output, mask=None))]
    fn remove_file(&self, py: Python<'_>, input: PathBuf, output: PathBuf, mask: Option<PathBuf>) -> PyResult<()> {
        py.detach(|| {
            let img = dataio::load_image(&input)?;
            let m = mask.map(|p| detection::load_mask(p, img.size())).transpose()?;
            let out = self.inner.infer(&img, m.as_ref())?;
            dataio::save_image(&out.i2, &output)
        })
        .map_err(to_py)
    }
}

/// Write `count` synthetic triplets under `out_dir`; returns the attenuation
/// used for each.
#[pyfunction]
#[pyo3(signature = (out_dir, count=16, size=128, seed=0))]
fn synthesize(py: Python<'_>, out_dir: PathBuf, count: usize, size: usize, seed: u64) -> PyResult<Vec<f64>> {
    let cfg = SynthConfig {
        height: size,
        width: size,
        seed,
        ..Default::default()
    };
    py.detach(|| {
        cfg.validate()?;
        let items = dataio::synth_batch(&cfg, count)?;
        let attenuation = items.iter().map(|s| s.attenuation).collect();
        let ds = dataio::Dataset::from_synthesized(items);
        dataio::write_dataset(&out_dir, &ds.samples)?;
        Ok(attenuation)
    })
    .map_err(to_py)
}

/// Binary shadow mask from the Otsu detector.
#[pyfunction]
fn detect(pixels: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
    Ok(detection::otsu_detect(&image(pixels, height, width)?).data().to_vec())
}

#[pyfunction]
fn default_config() -> PyResult<String> {
    serde_json::to_string(&TrainConfig::default()).map_err(json_err)
}

/// Train from a JSON config (missing keys take defaults). Writes the
/// checkpoint and loss log into `output_dir` and returns the checkpoint path.
#[pyfunction]
fn train(py: Python<'_>, config: &str) -> PyResult<PathBuf> {
    let cfg: TrainConfig = serde_json::from_str(config).map_err(json_err)?;
    py.detach(|| pipeline::train(&cfg))
        .map(|o| o.checkpoint_path)
        .map_err(to_py)
}

#[pyfunction]
fn rmse(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    metrics::rmse(&image(a, height, width)?, &image(b, height, width)?).map_err(to_py)
}

#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    metrics::psnr(&image(a, height, width)?, &image(b, height, width)?).map_err(to_py)
}

#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, height: usize, width: usize) -> PyResult<f64> {
    metrics::ssim(&image(a, height, width)?, &image(b, height, width)?).map_err(to_py)
}

#[pyfunction]
fn levenshtein(a: &str, b: &str) -> usize {
    metrics::levenshtein(a, b)
}

/// Score matching PNG stems of two directories; returns the report as JSON.
#[pyfunction]
#[pyo3(signature = (pred, gt, jobs=1))]
fn evaluate(py: Python<'_>, pred: PathBuf, gt: PathBuf, jobs: usize) -> PyResult<String> {
    let meta = ReportMeta::new(gt.display().to_string(), None);
    let report = py
        .detach(|| metrics::evaluate_dirs(&pred, &gt, None, meta, jobs))
        .map_err(to_py)?;
    serde_json::to_string(&report).map_err(json_err)
}

#[pymodule]
fn shadocnet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(levenshtein, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

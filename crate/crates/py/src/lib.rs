//! Python bindings. Tensors cross the boundary as flat lists of floats; the
//! heavy lifting (training, search, evaluation) stays on the Rust side and is
//! driven through config files and output directories.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use licprune::codec::{CodecConfig, CodecModel, CodecPreset};
use licprune::config::ExperimentConfig;
use licprune::data::load_image;
use licprune::eval::{bd_rate as core_bd_rate, RDCurve, RDPoint};
use licprune::nas;
use licprune::pipeline::{evaluate_checkpoint, Pipeline, RunSpec};
use licprune::pruner::{self, LayerShape};
use licprune::quant::{self, QuantParams, Signedness};

fn to_py(e: licprune::Error) -> PyErr {
    match e {
        licprune::Error::Argument(_) | licprune::Error::Shape(_) => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(format!("{}: {}", other.kind(), other)),
    }
}

fn curve(label: &str, points: Vec<(f64, f64)>) -> PyResult<RDCurve> {
    let pts = points
        .into_iter()
        .enumerate()
        .map(|(i, (bpp, psnr_db))| RDPoint { lambda: i as f64, bpp, psnr_db })
        .collect();
    RDCurve::new(label, pts).map_err(to_py)
}

/// BD-rate in percent of `test` against `reference`, each a list of `(bpp, psnr_db)`.
#[pyfunction]
fn bd_rate(reference: Vec<(f64, f64)>, test: Vec<(f64, f64)>) -> PyResult<f64> {
    core_bd_rate(&curve("reference", reference)?, &curve("test", test)?).map_err(to_py)
}

/// Quantize-dequantize `weights` laid out as `filters` contiguous blocks with
/// per-filter (or single) scale and zero-point.
#[pyfunction]
#[pyo3(signature = (weights, filters, scale, zero_point, bits=8))]
fn quantize_weights(weights: Vec<f64>, filters: usize, scale: Vec<f64>, zero_point: Vec<f64>, bits: u32) -> PyResult<Vec<f64>> {
    let p = QuantParams::new(scale, zero_point, bits, Signedness::UnsignedWeights).map_err(to_py)?;
    quant::quantize_weights(&weights, filters, &p).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (bits, signed=false))]
fn clip_bounds(bits: u32, signed: bool) -> (f64, f64) {
    let s = if signed { Signedness::SignedActivations } else { Signedness::UnsignedWeights };
    quant::clip_bounds(bits, s)
}

#[pyfunction]
fn min_keep(channels: usize) -> usize {
    pruner::min_keep(channels)
}

#[pyfunction]
fn candidate_counts(channels: usize, group: usize) -> Vec<usize> {
    nas::candidate_counts(channels, group)
}

/// Largest tested count whose RD-loss change is within `alpha`.
#[pyfunction]
fn select_count(tested: Vec<(usize, f64)>, alpha: f64) -> usize {
    nas::select_count(&tested, alpha)
}

/// Weight sparsity for layers `(id, out, in, kernel_area)` with kept counts `{id: (out, in)}`.
#[pyfunction]
fn sparsity(shapes: Vec<(String, usize, usize, usize)>, kept: BTreeMap<String, (usize, usize)>) -> f64 {
    let shapes: Vec<LayerShape> = shapes
        .into_iter()
        .map(|(layer_id, out_ch, in_ch, kernel_area)| LayerShape { layer_id, out_ch, in_ch, kernel_area })
        .collect();
    pruner::sparsity_from_counts(&shapes, &kept).s
}

/// A codec held on the Rust side.
#[pyclass(name = "Codec")]
struct PyCodec {
    model: CodecModel,
}

#[pymethods]
impl PyCodec {
    /// Fresh codec. `preset` is "desk" or "full"; `n`/`m` override the widths.
    #[new]
    #[pyo3(signature = (preset="desk", seed=0, n=None, m=None))]
    fn new(preset: &str, seed: u64, n: Option<usize>, m: Option<usize>) -> PyResult<Self> {
        let cfg = match (n, m) {
            (Some(n), Some(m)) => CodecConfig::mean_scale(n, m, 3).map_err(to_py)?,
            (None, None) => match preset {
                "desk" => CodecConfig::preset(CodecPreset::Desk),
                "full" => CodecConfig::preset(CodecPreset::Full),
                other => return Err(PyValueError::new_err(format!("unknown preset '{}'", other))),
            },
            _ => return Err(PyValueError::new_err("give both n and m or neither")),
        };
        Ok(PyCodec { model: CodecModel::new(cfg, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, _) = licprune::checkpoint::load_checkpoint(&path).map_err(to_py)?;
        Ok(PyCodec { model })
    }

    fn param_count(&self) -> usize {
        self.model.param_count()
    }

    fn prunable_layers(&self) -> Vec<(String, usize, usize, usize)> {
        LayerShape::of_model(&self.model).into_iter().map(|s| (s.layer_id, s.out_ch, s.in_ch, s.kernel_area)).collect()
    }

    /// `(bpp, psnr_db)` for one image file, padded to the codec's stride.
    fn evaluate(&self, image: PathBuf) -> PyResult<(f64, f64)> {
        let t = load_image(&image).map_err(to_py)?;
        let e = licprune::data::EvalImage::new(image.display().to_string(), &t, self.model.config.total_factor())
            .map_err(to_py)?;
        let s = licprune::eval::evaluate_image(&self.model, &e).map_err(to_py)?;
        Ok((s.bpp, s.psnr_db))
    }
}

/// Evaluates a checkpoint over a directory; writes per-image scores to `out_csv`.
#[pyfunction]
fn evaluate(checkpoint: PathBuf, eval_dir: PathBuf, out_csv: PathBuf) -> PyResult<(f64, f64)> {
    evaluate_checkpoint(&checkpoint, &eval_dir, &out_csv).map_err(to_py)
}

/// Runs the experiment in a TOML config end to end and returns the run summary as JSON.
#[pyfunction]
#[pyo3(signature = (config_path, quantized=false))]
fn run_experiment(py: Python<'_>, config_path: PathBuf, quantized: bool) -> PyResult<String> {
    let cfg = ExperimentConfig::load(&config_path).map_err(to_py)?;
    let spec = RunSpec::from_config(&cfg, quantized);
    let summary = py
        .detach(|| -> licprune::Result<_> {
            let mut p = Pipeline::open(cfg)?;
            p.run(&spec)
        })
        .map_err(to_py)?;
    Ok(serde_json::to_string(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))?)
}

#[pymodule]
pub fn licprune_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCodec>()?;
    m.add_function(wrap_pyfunction!(bd_rate, m)?)?;
    m.add_function(wrap_pyfunction!(quantize_weights, m)?)?;
    m.add_function(wrap_pyfunction!(clip_bounds, m)?)?;
    m.add_function(wrap_pyfunction!(min_keep, m)?)?;
    m.add_function(wrap_pyfunction!(candidate_counts, m)?)?;
    m.add_function(wrap_pyfunction!(select_count, m)?)?;
    m.add_function(wrap_pyfunction!(sparsity, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}

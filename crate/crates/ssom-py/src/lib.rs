//! Python bindings for the core crate: dataset generation, training,
//! evaluation, prediction, and metric helpers.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ssom_core::adalora::RankAllocator;
use ssom_core::checkpoint::load_full;
use ssom_core::config::RunConfig;
use ssom_core::data::{generate_synthetic, read_ppm, DatasetManifest};
use ssom_core::error::SsomError;
use ssom_core::metrics::{self, evaluate_dataset, ThresholdMode};
use ssom_core::model::{predict_logits, SsomModel};
use ssom_core::tape::sigmoid;
use ssom_core::tensor::Tensor;
use ssom_core::trainer::{param_report, Trainer};

fn to_py_err(e: SsomError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_threshold(s: &str) -> PyResult<ThresholdMode> {
    if s == "adaptive" {
        return Ok(ThresholdMode::Adaptive);
    }
    if let Some(v) = s.strip_prefix("fixed:") {
        let t: f64 = v
            .parse()
            .map_err(|_| PyValueError::new_err(format!("invalid threshold {s:?}")))?;
        return Ok(ThresholdMode::Fixed(t));
    }
    Err(PyValueError::new_err(format!(
        "invalid threshold {s:?} (expected adaptive or fixed:<t>)"
    )))
}

fn config_from_overrides(overrides: Option<HashMap<String, String>>) -> PyResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(map) = overrides {
        let mut pairs: Vec<_> = map.into_iter().collect();
        pairs.sort();
        for (k, v) in pairs {
            cfg.set(&k, &v).map_err(to_py_err)?;
        }
    }
    cfg.encoder.validate().map_err(to_py_err)?;
    cfg.train.validate().map_err(to_py_err)?;
    Ok(cfg)
}

/// A trained (or freshly initialized) saliency model.
#[pyclass]
struct Model {
    inner: SsomModel,
}

#[pymethods]
impl Model {
    /// Load a model from a full training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_full(&path).map_err(to_py_err)?;
        Ok(Model { inner })
    }

    /// Predicted saliency probabilities for one image, as a row-major
    /// H x W nested list. `image` is row-major H x W x 3 with values in [0,1].
    fn predict(&self, image: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<Vec<f64>>> {
        let tensor = Tensor::new(vec![height, width, 3], image).map_err(to_py_err)?;
        let logits = predict_logits(&self.inner, &tensor).map_err(to_py_err)?;
        Ok(logits
            .data()
            .chunks(width)
            .map(|row| row.iter().map(|v| sigmoid(*v)).collect())
            .collect())
    }

    /// Predicted saliency probabilities for a PPM image file.
    fn predict_file(&self, path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
        let image = read_ppm(&path).map_err(to_py_err)?;
        let (h, w) = (image.shape()[0], image.shape()[1]);
        self.predict(image.data().to_vec(), h, w)
    }

    /// Parameter census: total, frozen, trainable scalar counts and the
    /// encoder's trainable fraction.
    fn param_report(&self) -> HashMap<String, f64> {
        let r = param_report(&self.inner);
        HashMap::from([
            ("total".into(), r.total as f64),
            ("frozen".into(), r.frozen as f64),
            ("trainable".into(), r.trainable as f64),
            ("encoder_trainable_fraction".into(), r.encoder_trainable_fraction()),
        ])
    }

    /// Per-adapter (name, retained, capacity) rank summary.
    fn ranks(&self) -> Vec<(String, usize, usize)> {
        self.inner
            .triplets()
            .iter()
            .map(|t| (t.base_name.clone(), t.nnz(), t.rank_cap))
            .collect()
    }
}

/// Generate a synthetic shapes dataset; returns the sample count.
#[pyfunction]
#[pyo3(signature = (out_dir, n=200, image_size=32, seed=42, split="train"))]
fn gen_data(out_dir: PathBuf, n: usize, image_size: usize, seed: u64, split: &str) -> PyResult<usize> {
    let manifest = generate_synthetic(&out_dir, n, image_size, seed, split).map_err(to_py_err)?;
    Ok(manifest.entries.len())
}

/// Train a fresh model; returns summary statistics.
#[pyfunction]
#[pyo3(signature = (data_dir, out_dir, overrides=None))]
fn train(
    data_dir: PathBuf,
    out_dir: PathBuf,
    overrides: Option<HashMap<String, String>>,
) -> PyResult<HashMap<String, f64>> {
    let cfg = config_from_overrides(overrides)?;
    let manifest = DatasetManifest::load(&data_dir).map_err(to_py_err)?;
    let samples = manifest.load_samples().map_err(to_py_err)?;
    let mut trainer = Trainer::new(cfg.train.clone()).map_err(to_py_err)?;
    let total = trainer.total_steps(samples.len());
    let schedule = cfg
        .resolve_schedule(total, cfg.encoder.adapter_slots())
        .map_err(to_py_err)?;
    trainer.config.schedule = Some(schedule.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut model = SsomModel::new(cfg.encoder.clone(), RankAllocator::new(schedule), &mut rng)
        .map_err(to_py_err)?;
    let report = trainer.train(&mut model, &samples, &out_dir).map_err(to_py_err)?;
    Ok(HashMap::from([
        ("steps".into(), report.rows.len() as f64),
        ("initial_total".into(), report.initial_total),
        ("final_total".into(), report.final_total),
    ]))
}

/// Evaluate a checkpoint against a dataset; returns {"f_beta", "mae", "n"}.
#[pyfunction]
#[pyo3(signature = (checkpoint, data_dir, threshold="adaptive"))]
fn evaluate(checkpoint: PathBuf, data_dir: PathBuf, threshold: &str) -> PyResult<HashMap<String, f64>> {
    let mode = parse_threshold(threshold)?;
    let (model, _) = load_full(Path::new(&checkpoint)).map_err(to_py_err)?;
    let manifest = DatasetManifest::load(&data_dir).map_err(to_py_err)?;
    let samples = manifest.load_samples().map_err(to_py_err)?;
    let items: Vec<(String, Tensor, Tensor)> = samples
        .into_iter()
        .map(|s| (s.id, s.image, s.mask))
        .collect();
    let report = evaluate_dataset(&model, &items, mode).map_err(to_py_err)?;
    Ok(HashMap::from([
        ("f_beta".into(), report.f_beta),
        ("mae".into(), report.mae),
        ("n".into(), report.per_sample.len() as f64),
    ]))
}

/// F-measure with hard counts; prediction and ground truth are flat
/// same-length lists, ground truth binary.
#[pyfunction]
#[pyo3(signature = (pred, gt, beta_sq=0.3, threshold=0.5))]
fn f_beta(pred: Vec<f64>, gt: Vec<f64>, beta_sq: f64, threshold: f64) -> PyResult<f64> {
    let n = pred.len();
    let p = Tensor::new(vec![n], pred).map_err(to_py_err)?;
    let g = Tensor::new(vec![n], gt).map_err(to_py_err)?;
    metrics::f_beta(&p, &g, beta_sq, threshold).map_err(to_py_err)
}

/// Mean absolute error between two flat same-length lists.
#[pyfunction]
fn mae(pred: Vec<f64>, gt: Vec<f64>) -> PyResult<f64> {
    let n = pred.len();
    let p = Tensor::new(vec![n], pred).map_err(to_py_err)?;
    let g = Tensor::new(vec![n], gt).map_err(to_py_err)?;
    metrics::mae(&p, &g).map_err(to_py_err)
}

/// Binarization threshold: twice the mean, capped at 1.
#[pyfunction]
fn adaptive_threshold(pred: Vec<f64>) -> PyResult<f64> {
    let n = pred.len();
    let p = Tensor::new(vec![n], pred).map_err(to_py_err)?;
    Ok(metrics::adaptive_threshold(&p))
}

/// Finite-difference check of every operator; returns name -> max rel err.
#[pyfunction]
#[pyo3(signature = (eps=1e-6))]
fn grad_check(eps: f64) -> PyResult<HashMap<String, f64>> {
    let suite = ssom_core::gradcheck::standard_suite(eps).map_err(to_py_err)?;
    Ok(suite.into_iter().map(|(k, v)| (k.to_string(), v)).collect())
}

#[pymodule]
fn ssom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(gen_data, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(f_beta, m)?)?;
    m.add_function(wrap_pyfunction!(mae, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}

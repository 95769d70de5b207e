//! Python bindings: catalogs, toy encoders, models, segmentation and a few
//! metric helpers. Matrices cross the boundary as nested lists.

use std::path::PathBuf;

use attrseg::aggregator::{Aggregator, AggregatorConfig, Strategy, TextInput};
use attrseg::catalog::{self, PromptTemplate};
use attrseg::config::RunConfig;
use attrseg::encoders::{EncoderConfig, TextEncoder, ToyEncoder as CoreEncoder, VisualEncoder};
use attrseg::eval;
use attrseg::mask::MaskHeadConfig;
use attrseg::pipeline::Segmenter;
use attrseg::synth::{generate_dataset as core_generate, GenerationConfig};
use attrseg::tape::{Mat, Tape};
use attrseg::train::{self, TrainConfig};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: attrseg::Error) -> PyErr {
    match e {
        attrseg::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Mat::from_shape_vec((r, c), rows.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Splits a language-model answer on semicolons, trimming and deduplicating.
#[pyfunction]
fn parse_llm_answer(raw: &str) -> Vec<String> {
    catalog::parse_llm_answer(raw)
}

/// Renders the question templates for one category (the five built-in
/// templates when `templates` is omitted).
#[pyfunction]
#[pyo3(signature = (category, templates=None))]
fn build_prompts(category: &str, templates: Option<Vec<String>>) -> PyResult<Vec<String>> {
    let templates = match templates {
        Some(t) => t
            .into_iter()
            .enumerate()
            .map(|(i, text)| PromptTemplate::new(format!("U{}", i + 1), text))
            .collect(),
        None => catalog::default_templates(),
    };
    catalog::build_prompts(category, &templates).map_err(py_err)
}

#[pyfunction]
fn binary_iou(pred: Vec<Vec<f64>>, gt: Vec<Vec<f64>>) -> PyResult<f64> {
    eval::binary_iou(&from_rows(pred)?, &from_rows(gt)?).map_err(py_err)
}

/// Learning rate at `step` under the warmup + cosine schedule.
#[pyfunction]
#[pyo3(signature = (step, steps_per_epoch, epochs=20, warmup_epochs=10, lr_init=4e-6, lr_peak=1e-3))]
fn lr_at_step(
    step: usize,
    steps_per_epoch: usize,
    epochs: usize,
    warmup_epochs: usize,
    lr_init: f64,
    lr_peak: f64,
) -> f64 {
    let cfg = TrainConfig {
        epochs,
        warmup_epochs,
        lr_init,
        lr_peak,
        ..TrainConfig::default()
    };
    train::lr_at_step(step, steps_per_epoch, &cfg)
}

/// The default run configuration as a JSON string.
#[pyfunction]
fn default_config_json() -> String {
    serde_json::to_string_pretty(&RunConfig::default()).expect("serializable")
}

/// Generates the synthetic dataset under `out_dir`; returns the sample count.
#[pyfunction]
#[pyo3(signature = (out_dir, categories=20, per_category=25, canvas=64, seed=0))]
fn generate_dataset(out_dir: PathBuf, categories: usize, per_category: usize, canvas: u32, seed: u64) -> PyResult<usize> {
    let encoder = CoreEncoder::new(EncoderConfig::default()).map_err(py_err)?;
    let cfg = GenerationConfig {
        categories,
        per_category,
        canvas: (canvas, canvas),
        seed,
    };
    let ds = core_generate(&cfg, &encoder).map_err(py_err)?;
    ds.write(&out_dir).map_err(py_err)?;
    Ok(ds.samples.len())
}

#[pyclass(name = "Catalog")]
struct PyCatalog {
    inner: catalog::Catalog,
}

#[pymethods]
impl PyCatalog {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: catalog::load_catalog(&path).map_err(py_err)?,
        })
    }

    /// The bundled twenty-category PASCAL-style catalog.
    #[staticmethod]
    fn pascal() -> Self {
        Self {
            inner: catalog::pascal_fixture(),
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        catalog::save_catalog(&self.inner, &path).map_err(py_err)
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().into_iter().map(str::to_string).collect()
    }

    fn attributes(&self, name: &str) -> PyResult<Vec<String>> {
        Ok(self.inner.get(name).map_err(py_err)?.attributes.clone())
    }

    fn sample(&self, name: &str, count: usize, seed: u64) -> PyResult<Vec<String>> {
        catalog::sample_attributes_seeded(self.inner.get(name).map_err(py_err)?, count, seed).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.categories.len()
    }
}

#[pyclass(name = "ToyEncoder")]
struct PyEncoder {
    inner: CoreEncoder,
}

#[pymethods]
impl PyEncoder {
    #[new]
    #[pyo3(signature = (d=32, patch_size=8, hash_vocab=4096, seed=0))]
    fn new(d: usize, patch_size: usize, hash_vocab: usize, seed: u64) -> PyResult<Self> {
        let inner = CoreEncoder::new(EncoderConfig {
            d,
            patch_size,
            hash_vocab,
            seed,
        })
        .map_err(py_err)?;
        Ok(Self { inner })
    }

    /// One unit-norm row per attribute.
    fn encode_attributes(&self, attributes: Vec<String>) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&self.inner.encode_attributes(&attributes).map_err(py_err)?.data))
    }

    /// Visual tokens of a PNG image, one row per patch in row-major order.
    fn encode_image(&self, path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
        let img = image::open(&path)
            .map_err(|e| PyIOError::new_err(e.to_string()))?
            .to_rgb8();
        Ok(to_rows(&self.inner.encode_image(&img).map_err(py_err)?.data))
    }

    #[getter]
    fn dim(&self) -> usize {
        VisualEncoder::dim(&self.inner)
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    model: Aggregator,
    encoder: CoreEncoder,
    head: MaskHeadConfig,
}

#[pymethods]
impl PyModel {
    /// A freshly initialized model with the default encoder and mask head.
    #[new]
    #[pyo3(signature = (strategy="hrchy", schedule=vec![15, 10, 5, 1], seed=0))]
    fn new(strategy: &str, schedule: Vec<usize>, seed: u64) -> PyResult<Self> {
        let strategy: Strategy = strategy.parse().map_err(py_err)?;
        let model = Aggregator::new(strategy, AggregatorConfig::with_schedule(&schedule), seed).map_err(py_err)?;
        Ok(Self {
            model,
            encoder: CoreEncoder::new(EncoderConfig::default()).map_err(py_err)?,
            head: MaskHeadConfig::default(),
        })
    }

    /// Loads a checkpoint directory written by `attrseg train`.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, extra) = Aggregator::load(&path).map_err(py_err)?;
        let cfg: RunConfig = match extra.get("config") {
            Some(v) => serde_json::from_value(v.clone()).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => RunConfig::default(),
        };
        Ok(Self {
            model,
            encoder: CoreEncoder::new(cfg.encoder()).map_err(py_err)?,
            head: cfg.head(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.model.save(&path, serde_json::json!({})).map_err(py_err)
    }

    #[getter]
    fn strategy(&self) -> String {
        self.model.strategy.to_string()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.model.params.num_scalars()
    }

    /// The aggregated `1 × d` token for an image and attribute list.
    fn final_token(&self, image: PathBuf, attributes: Vec<String>) -> PyResult<Vec<f64>> {
        let img = image::open(&image)
            .map_err(|e| PyIOError::new_err(e.to_string()))?
            .to_rgb8();
        let visual = self.encoder.encode_image(&img).map_err(py_err)?;
        let text = TextInput::encode(&self.encoder, &attributes).map_err(py_err)?;
        let mut t = Tape::new();
        let p = self.model.params.bind(&mut t, false);
        let v = t.constant(visual.data);
        let out = self.model.forward(&mut t, &p, v, &text).map_err(py_err)?;
        Ok(t.value(out.token).row(0).to_vec())
    }

    /// Binary mask (0/1 rows) of an image for the given attributes.
    fn segment(&self, image: PathBuf, attributes: Vec<String>) -> PyResult<Vec<Vec<u8>>> {
        let img = image::open(&image)
            .map_err(|e| PyIOError::new_err(e.to_string()))?
            .to_rgb8();
        let seg = Segmenter::new(&self.encoder, &self.model, &self.head).map_err(py_err)?;
        let (_, mask) = seg.segment(&img, &attributes).map_err(py_err)?;
        Ok(mask
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|&v| u8::from(v > 0.5)).collect())
            .collect())
    }
}

#[pymodule]
fn pyattrseg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(parse_llm_answer, m)?)?;
    m.add_function(wrap_pyfunction!(build_prompts, m)?)?;
    m.add_function(wrap_pyfunction!(binary_iou, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at_step, m)?)?;
    m.add_function(wrap_pyfunction!(default_config_json, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_class::<PyCatalog>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}

//! Python module `paxnet`: images, synthetic data, tooth extraction, the
//! classifier and Grad-CAM.

use std::path::PathBuf;

use paxnet::capsnet::{self, ModelConfig, PaXNetModel, Sample};
use paxnet::explain;
use paxnet::ga_isolate::JawType;
use paxnet::imgproc::{io, GrayImage};
use paxnet::pipeline::{extract_single_jaw, extract_teeth, ExtractConfig};
use paxnet::training::{self, synth, SynthConfig};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

create_exception!(paxnet, PaxnetError, PyException);

fn err(e: paxnet::Error) -> PyErr {
    match e {
        paxnet::Error::Parameter(_) | paxnet::Error::Config(_) | paxnet::Error::Shape(_) => PyValueError::new_err(e.to_string()),
        _ => PaxnetError::new_err(e.to_string()),
    }
}

fn jaw_name(j: JawType) -> &'static str {
    match j {
        JawType::Maxilla => "maxilla",
        JawType::Mandible => "mandible",
    }
}

fn parse_jaw(s: &str) -> PyResult<JawType> {
    match s {
        "maxilla" => Ok(JawType::Maxilla),
        "mandible" => Ok(JawType::Mandible),
        _ => Err(PyValueError::new_err(format!("unknown jaw '{s}'"))),
    }
}

/// Greyscale image with values in [0, 1], row-major.
#[pyclass(name = "Image", from_py_object)]
#[derive(Clone)]
struct PyImage(GrayImage);

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: usize, height: usize, data: Vec<f64>) -> PyResult<Self> {
        GrayImage::from_vec(width, height, data).map(PyImage).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        io::load(path).map(PyImage).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save(&self.0, path).map_err(err)
    }

    #[getter]
    fn width(&self) -> usize {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.0.height()
    }

    fn to_list(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn get(&self, x: usize, y: usize) -> PyResult<f64> {
        if x >= self.0.width() || y >= self.0.height() {
            return Err(PyValueError::new_err("pixel outside the image"));
        }
        Ok(self.0.get(x, y))
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.0.width(), self.0.height())
    }
}

/// One isolated tooth.
#[pyclass(name = "Tooth", get_all)]
struct PyTooth {
    jaw: String,
    region: u8,
    image: PyImage,
    bounds: Vec<(f64, f64)>,
}

/// Trained classifier loaded from a checkpoint.
#[pyclass(name = "Model")]
struct PyModel(PaXNetModel);

fn model_config(json: Option<&str>) -> PyResult<ModelConfig> {
    match json {
        Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(ModelConfig::mini()),
    }
}

#[pymethods]
impl PyModel {
    /// `config` is the model configuration as JSON; the reduced 32-px
    /// configuration is assumed when it is omitted.
    #[staticmethod]
    #[pyo3(signature = (checkpoint, config=None))]
    fn load(checkpoint: PathBuf, config: Option<&str>) -> PyResult<Self> {
        PaXNetModel::load(model_config(config)?, checkpoint).map(PyModel).map_err(err)
    }

    /// Randomly initialised model with a randomly initialised encoder.
    #[staticmethod]
    #[pyo3(signature = (seed, config=None))]
    fn untrained(seed: u64, config: Option<&str>) -> PyResult<Self> {
        let cfg = model_config(config)?;
        let ae = capsnet::AutoencoderModel::new(cfg.autoencoder.clone(), seed).map_err(err)?;
        PaXNetModel::new(cfg, &ae, seed).map(PyModel).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(err)
    }

    /// Class probabilities; index 1 is caries.
    fn predict(&self, image: &PyImage) -> PyResult<Vec<f64>> {
        let out = self.0.forward(&[Sample::anonymous(&image.0)]).map_err(err)?;
        Ok(out[0].probs.data().to_vec())
    }

    fn layer_names(&self) -> Vec<String> {
        explain::layer_names(&self.0)
    }

    /// Heatmap for `target` (the predicted class by default) at `layer`
    /// (the fusion layer by default).
    #[pyo3(signature = (image, target=None, layer=None))]
    fn gradcam(&self, image: &PyImage, target: Option<usize>, layer: Option<&str>) -> PyResult<PyImage> {
        let target = match target {
            Some(t) => t,
            None => self.0.forward(&[Sample::anonymous(&image.0)]).map_err(err)?[0].predicted(),
        };
        let h = explain::grad_cam(&self.0, Sample::anonymous(&image.0), target, layer.unwrap_or("fusion")).map_err(err)?;
        Ok(PyImage(h.values))
    }
}

#[pyfunction]
fn squash(s: Vec<f64>) -> Vec<f64> {
    capsnet::squash(&s)
}

#[pyfunction]
fn f05(precision: f64, recall: f64) -> f64 {
    training::f05(precision, recall)
}

/// Writes `n` labelled synthetic teeth to `out`; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (n, out, caries_fraction=0.5, seed=0, size=64))]
fn synth_teeth(n: usize, out: PathBuf, caries_fraction: f64, seed: u64, size: usize) -> PyResult<PathBuf> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SynthConfig { size, ..Default::default() };
    let mut data = training::synth_dataset(n, caries_fraction, &cfg, &mut rng).map_err(err)?;
    data.write(out).map_err(err)
}

/// Synthetic panoramic image and its true ROI `(left, top, right, bottom)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn synth_panoramic(seed: u64) -> PyResult<(PyImage, (usize, usize, usize, usize))> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = synth::synth_panoramic(&Default::default(), &mut rng).map_err(err)?;
    Ok((PyImage(p.image), (p.roi.left, p.roi.top, p.roi.right, p.roi.bottom)))
}

/// Single-tooth crops of a panoramic image, or of one jaw when `jaw` is
/// given.
#[pyfunction]
#[pyo3(signature = (image, seed=0, jaw=None))]
fn extract(image: &PyImage, seed: u64, jaw: Option<&str>) -> PyResult<Vec<PyTooth>> {
    let cfg = ExtractConfig::default().with_seed(seed);
    let ex = match jaw {
        Some(j) => extract_single_jaw(&image.0, parse_jaw(j)?, &cfg),
        None => extract_teeth(&image.0, &cfg),
    }
    .map_err(err)?;
    Ok(ex
        .jaws
        .into_iter()
        .flat_map(|j| j.isolation.crops)
        .map(|c| PyTooth {
            jaw: jaw_name(c.jaw).into(),
            region: c.region.id(),
            image: PyImage(c.image),
            bounds: c.source_bounds.to_vec(),
        })
        .collect())
}

#[pymodule(name = "paxnet")]
fn paxnet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PaxnetError", m.py().get_type::<PaxnetError>())?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyTooth>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(squash, m)?)?;
    m.add_function(wrap_pyfunction!(f05, m)?)?;
    m.add_function(wrap_pyfunction!(synth_teeth, m)?)?;
    m.add_function(wrap_pyfunction!(synth_panoramic, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    Ok(())
}

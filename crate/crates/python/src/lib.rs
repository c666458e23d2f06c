//! Python bindings: datasets, models, training, evaluation and the
//! gradient check, with nested lists standing in for tensors.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

use tshsr::data::{self, SyntheticSpec};
use tshsr::eval::{self, EvalReport};
use tshsr::fusion::{bidirectional_ranking_loss, LossBatch};
use tshsr::numerics::{GradCheckReport, DEFAULT_EPSILON};
use tshsr::train::{self, TrainConfig};
use tshsr::{Error, Model, ModelConfig, Tape, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for tshsr::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("expected a non-empty rectangular list of rows"));
    }
    let n = rows.len();
    Tensor::matrix(n, cols, rows.concat()).py()
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    match t.shape() {
        [_, cols] => t.data().chunks(*cols).map(<[f64]>::to_vec).collect(),
        _ => vec![t.data().to_vec()],
    }
}

fn report_dict<'py>(py: Python<'py>, r: &EvalReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("sentence", r.sentence().r_at.to_vec())?;
    d.set_item("image", r.image().r_at.to_vec())?;
    d.set_item("rsum", r.rsum())?;
    d.set_item("folds", r.folds)?;
    Ok(d)
}

/// Image-caption pairs: `[K×D_raw]` regions and token-id captions per image.
#[pyclass(name = "Dataset")]
#[derive(Clone)]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (pairs=16, k=4, d_raw=8, length=6, vocab_size=50, seed=0, signal_strength=1.0, captions_per_image=1, region_scale=1.0))]
    #[allow(clippy::too_many_arguments)]
    fn synthetic(
        pairs: usize,
        k: usize,
        d_raw: usize,
        length: usize,
        vocab_size: usize,
        seed: u64,
        signal_strength: f64,
        captions_per_image: usize,
        region_scale: f64,
    ) -> PyResult<Self> {
        let spec = SyntheticSpec {
            n_pairs: pairs,
            k,
            d_raw,
            len: length,
            vocab_size,
            seed,
            signal_strength,
            captions_per_image,
            region_scale,
        };
        Ok(PyDataset {
            inner: data::gen_synthetic(&spec).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: data::read_dataset(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::write_dataset(&self.inner, &path).py().map(|_| ())
    }

    #[getter]
    fn num_images(&self) -> usize {
        self.inner.num_images()
    }

    #[getter]
    fn num_captions(&self) -> usize {
        self.inner.num_captions()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn max_len(&self) -> usize {
        self.inner.max_len
    }

    fn regions(&self, image: usize) -> PyResult<Vec<Vec<f64>>> {
        let b = self.bundle(image)?;
        Ok(to_rows(&b.regions))
    }

    fn captions(&self, image: usize) -> PyResult<Vec<Vec<u32>>> {
        Ok(self.bundle(image)?.captions.clone())
    }

    /// Images `start..stop` as a new dataset.
    fn subset(&self, start: usize, stop: usize) -> PyResult<Self> {
        if start >= stop || stop > self.inner.num_images() {
            return Err(PyValueError::new_err("subset range out of bounds"));
        }
        Ok(PyDataset {
            inner: self.inner.subset(start..stop, self.inner.split),
        })
    }

    fn __len__(&self) -> usize {
        self.inner.num_images()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(name={:?}, images={}, captions={})",
            self.inner.name,
            self.inner.num_images(),
            self.inner.num_captions()
        )
    }
}

impl PyDataset {
    fn bundle(&self, image: usize) -> PyResult<&data::FeatureBundle> {
        self.inner
            .bundles
            .get(image)
            .ok_or_else(|| PyValueError::new_err(format!("image {image} out of range")))
    }
}

/// A scoring model. Keyword arguments override configuration fields
/// (`raw_dim`, `dim`, `layers`, `stream`, ...).
#[pyclass(name = "Model")]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut config = ModelConfig::default();
        if let Some(kw) = kwargs {
            for (k, v) in kw.iter() {
                let key: String = k.extract()?;
                let value = if v.is_instance_of::<PyBool>() {
                    v.extract::<bool>()?.to_string()
                } else {
                    v.str()?.to_string()
                };
                if !config.set(&key, &value).py()? {
                    return Err(PyValueError::new_err(format!("unknown model setting `{key}`")));
                }
            }
        }
        Ok(PyModel {
            inner: Model::new(config).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel {
            inner: train::load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        train::save_checkpoint(&self.inner, &path).py()
    }

    fn config(&self) -> BTreeMap<String, String> {
        let mut doc = tshsr::kv::KvDoc::new();
        self.inner.config.write_kv(&mut doc, "");
        doc.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.params.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names().map(str::to_string).collect()
    }

    /// `(shape, values)` of one parameter, values flattened row-major.
    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self.inner.params.get(name).py()?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    fn set_parameter(&mut self, name: &str, values: Vec<f64>) -> PyResult<()> {
        let shape = self.inner.params.get(name).py()?.shape().to_vec();
        let t = Tensor::new(shape, values).py()?;
        self.inner.params.set(name, t).py()
    }

    fn score(&self, regions: Vec<Vec<f64>>, tokens: Vec<u32>) -> PyResult<f64> {
        self.inner.score_pair(&to_matrix(regions)?, &tokens).py()
    }

    /// Scores of every image against every caption, `[images][captions]`.
    fn score_matrix(&self, images: Vec<Vec<Vec<f64>>>, captions: Vec<Vec<u32>>) -> PyResult<Vec<Vec<f64>>> {
        let images = images.into_iter().map(to_matrix).collect::<PyResult<Vec<_>>>()?;
        Ok(to_rows(&self.inner.score_matrix(&images, &captions).py()?))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(dim={}, sim_dim={}, layers={}, stream={}, parameters={})",
            c.dim,
            c.sim_dim,
            c.layers,
            c.stream,
            self.inner.params.num_scalars()
        )
    }
}

/// Trains a copy of `model`; returns the trained model and `(step, loss)` pairs.
#[pyfunction]
#[pyo3(signature = (model, dataset, batch_size=128, epochs=20, lr=2e-4, seed=0, margin=0.2, lr_decay=0.1, decay_epoch=None, max_steps=None))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    model: &PyModel,
    dataset: &PyDataset,
    batch_size: usize,
    epochs: usize,
    lr: f64,
    seed: u64,
    margin: f64,
    lr_decay: f64,
    decay_epoch: Option<usize>,
    max_steps: Option<usize>,
) -> PyResult<(PyModel, Vec<(usize, f64)>)> {
    let cfg = TrainConfig {
        batch_size,
        epochs,
        lr,
        lr_decay,
        decay_epoch,
        margin,
        seed,
        max_steps,
        ..TrainConfig::default()
    };
    let start = model.inner.clone();
    let data = &dataset.inner;
    let out = py.allow_threads(|| train::train(start, data, None, &cfg, |_| {})).py()?;
    Ok((PyModel { inner: out.last }, out.loss_curve))
}

/// Recall@{1,5,10} in both directions plus rsum.
#[pyfunction]
#[pyo3(signature = (model, dataset, folds=1))]
fn evaluate<'py>(py: Python<'py>, model: &PyModel, dataset: &PyDataset, folds: usize) -> PyResult<Bound<'py, PyDict>> {
    let report = py.allow_threads(|| eval::evaluate(&model.inner, &dataset.inner, folds)).py()?;
    report_dict(py, &report)
}

/// Recall from a precomputed `[images][captions]` score matrix; `owner[c]`
/// is the image caption `c` describes.
#[pyfunction]
#[pyo3(signature = (scores, owner, folds=1))]
fn recall<'py>(py: Python<'py>, scores: Vec<Vec<f64>>, owner: Vec<usize>, folds: usize) -> PyResult<Bound<'py, PyDict>> {
    let report = eval::recall_with_folds(&to_matrix(scores)?, &owner, folds).py()?;
    report_dict(py, &report)
}

/// Hardest-negative hinge loss of a square score grid, summed over both directions.
#[pyfunction]
#[pyo3(signature = (scores, margin=0.2))]
fn ranking_loss(scores: Vec<Vec<f64>>, margin: f64) -> PyResult<f64> {
    let batch = LossBatch::new(to_matrix(scores)?, margin).py()?;
    Ok(bidirectional_ranking_loss(&batch))
}

/// Similarity vector of two features under the `[m×d]` matrix `w`.
#[pyfunction]
fn sim_vec(x: Vec<f64>, y: Vec<f64>, w: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
    let mut tape = Tape::no_grad();
    let w = tape.constant(to_matrix(w)?);
    let x = tape.constant(Tensor::vector(x).py()?);
    let y = tape.constant(Tensor::vector(y).py()?);
    let s = tshsr::attention::sim_vec(&mut tape, x, y, w).py()?.s;
    Ok(tape.value(s).data().to_vec())
}

/// Largest relative error between backward and finite-difference gradients
/// per parameter, over one batch holding every pair of `dataset`.
#[pyfunction]
#[pyo3(signature = (model, dataset, margin=0.2, epsilon=DEFAULT_EPSILON))]
fn gradcheck(py: Python<'_>, model: &PyModel, dataset: &PyDataset, margin: f64, epsilon: f64) -> PyResult<BTreeMap<String, f64>> {
    let (caps, owner) = dataset.inner.flat_captions();
    let images: Vec<&Tensor> = owner.iter().map(|&i| &dataset.inner.bundles[i].regions).collect();
    let caps: Vec<&[u32]> = caps.iter().map(Vec::as_slice).collect();
    let m = &model.inner;
    let report = py
        .allow_threads(|| {
            let (_, analytic) = train::loss_gradients(m, &images, &caps, margin)?;
            let numeric = train::numeric_loss_gradients(m, &images, &caps, margin, epsilon)?;
            GradCheckReport::compare(&analytic, &numeric, 1e-4)
        })
        .py()?;
    Ok(report.entries.into_iter().map(|e| (e.name, e.max_rel_error)).collect())
}

#[pymodule]
fn pytshsr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(recall, m)?)?;
    m.add_function(wrap_pyfunction!(ranking_loss, m)?)?;
    m.add_function(wrap_pyfunction!(sim_vec, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

//! Python bindings: datasets, model configs, training, evaluation and
//! attention inspection.
//!
//! Reports and histories are returned as plain dicts and lists; matrices
//! as lists of rows.

use mtmm_core::attention;
use mtmm_core::checkpoint;
use mtmm_core::data::{self, Dims, SynthSpec};
use mtmm_core::metrics::{self, Thresholds};
use mtmm_core::model::{self, Modalities, TaskMode};
use mtmm_core::tensor::Tensor;
use mtmm_core::training::{self, AdamConfig, TrainOptions};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_rows()
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    Tensor::from_rows(&rows).map_err(value_err)
}

/// Converts a JSON value into the equivalent Python object.
fn to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match (n.as_i64(), n.as_f64()) {
            (Some(i), _) => i.into_pyobject(py)?.into_any(),
            (None, Some(f)) => f.into_pyobject(py)?.into_any(),
            _ => return Err(PyValueError::new_err("unrepresentable number")),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let items = a
                .iter()
                .map(|x| to_py(py, x))
                .collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn serialize<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &serde_json::to_value(v).map_err(value_err)?)
}

#[pyclass(name = "Dataset", module = "mtmm", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyDataset {
    pub inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        data::load_dataset(path)
            .map(|inner| Self { inner })
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[staticmethod]
    fn from_jsonl(text: &str) -> PyResult<Self> {
        data::Dataset::from_jsonl_str(text)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    #[pyo3(signature = (n_videos=8, u_min=3, u_max=8, dims=(16, 12, 10), noise=0.05, coupling=0.5, seed=0))]
    fn synthesize(
        n_videos: usize,
        u_min: usize,
        u_max: usize,
        dims: (usize, usize, usize),
        noise: f64,
        coupling: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let spec = SynthSpec {
            n_videos,
            u_min,
            u_max,
            dims: Dims::new(dims.0, dims.1, dims.2),
            noise_scale: noise,
            sentiment_coupling: coupling,
            ..SynthSpec::default()
        };
        data::synthesize_dataset(&spec, seed)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        data::save_dataset(&self.inner, path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn to_jsonl(&self) -> String {
        self.inner.to_jsonl()
    }

    /// `(train, dev)` with `fraction` of the videos in dev.
    #[pyo3(signature = (fraction=0.2, seed=0))]
    fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let (a, b) = self.inner.train_dev_split(fraction, seed);
        (Self { inner: a }, Self { inner: b })
    }

    #[getter]
    fn dims(&self) -> (usize, usize, usize) {
        let d = self.inner.dims;
        (d.text, d.acoustic, d.visual)
    }

    #[getter]
    fn num_utterances(&self) -> usize {
        self.inner.num_utterances()
    }

    fn video_ids(&self) -> Vec<String> {
        self.inner
            .videos
            .iter()
            .map(|v| v.video_id.clone())
            .collect()
    }

    /// Sentiment labels and emotion label vectors of one video.
    fn labels(&self, video_id: &str) -> PyResult<(Vec<u8>, Vec<Vec<u8>>)> {
        let v = video(&self.inner, video_id)?;
        Ok((
            v.utterances.iter().map(|u| u.sentiment).collect(),
            v.utterances.iter().map(|u| u.emotions.to_vec()).collect(),
        ))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(videos={}, utterances={}, dims={:?})",
            self.inner.len(),
            self.inner.num_utterances(),
            self.dims()
        )
    }
}

fn video<'a>(ds: &'a data::Dataset, id: &str) -> PyResult<&'a data::VideoSample> {
    ds.video(id)
        .ok_or_else(|| PyValueError::new_err(format!("unknown video id {id:?}")))
}

#[pyclass(name = "ModelConfig", module = "mtmm", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    pub inner: model::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (dims, d=100, dense_units=100, dropout=0.3, mode="mtl", modalities="t,a,v", loss_weight=0.5))]
    fn new(
        dims: (usize, usize, usize),
        d: usize,
        dense_units: usize,
        dropout: f64,
        mode: &str,
        modalities: &str,
        loss_weight: f64,
    ) -> PyResult<Self> {
        let inner = model::ModelConfig {
            d,
            dense_units,
            dropout_rate: dropout,
            mode: mode.parse::<TaskMode>().map_err(value_err)?,
            modalities: modalities.parse::<Modalities>().map_err(value_err)?,
            loss_weight_lambda: loss_weight,
            ..model::ModelConfig::new(Dims::new(dims.0, dims.1, dims.2))
        };
        inner.validate().map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.mode.as_str()
    }

    #[getter]
    fn modalities(&self) -> String {
        self.inner.modalities.label()
    }

    #[getter]
    fn rep_width(&self) -> usize {
        self.inner.rep_width()
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.to_json())
    }
}

#[pyclass(name = "Model", module = "mtmm", frozen)]
pub struct PyModel {
    pub params: model::ModelParams,
    pub config: model::ModelConfig,
}

#[pymethods]
impl PyModel {
    /// Freshly initialised parameters.
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        let params = model::build_model(&config.inner, seed).map_err(value_err)?;
        Ok(Self {
            params,
            config: config.inner.clone(),
        })
    }

    /// Trains a new model; returns `(model, history)`.
    #[staticmethod]
    #[pyo3(signature = (config, train, dev=None, epochs=50, batch_size=16, lr=0.001, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train<'py>(
        py: Python<'py>,
        config: &PyModelConfig,
        train: &PyDataset,
        dev: Option<&PyDataset>,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let opts = TrainOptions {
            epochs,
            batch_size,
            seed,
            adam: AdamConfig {
                lr,
                ..AdamConfig::default()
            },
            ..TrainOptions::default()
        };
        let cfg = config.inner.clone();
        let (train_set, dev_set) = (&train.inner, dev.map(|d| &d.inner));
        let (params, history) = py
            .detach(|| training::train(&cfg, train_set, dev_set, &opts))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        let history = serialize(py, &history)?;
        Ok((
            Self {
                params,
                config: cfg,
            },
            history,
        ))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let (params, config) =
            checkpoint::load(path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { params, config })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        checkpoint::save(&self.params, &self.config, path)
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.config.clone(),
        }
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.params.names().map(String::from).collect()
    }

    /// Metrics report as a dict.
    #[pyo3(signature = (dataset, thresholds=(0.4, 0.2)))]
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        thresholds: (f64, f64),
    ) -> PyResult<Bound<'py, PyAny>> {
        let t = Thresholds {
            f1: thresholds.0,
            wacc: thresholds.1,
        };
        let report =
            training::evaluate(&self.params, &self.config, &dataset.inner, t).map_err(value_err)?;
        serialize(py, &report)
    }

    /// Inference-mode head probabilities for one video:
    /// `{"sentiment": [[neg, pos], ...], "emotion": [[7 probs], ...]}`.
    fn predict<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        video_id: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let out = model::infer(video(&dataset.inner, video_id)?, &self.params, &self.config)
            .map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("sentiment", out.sentiment_probs.as_ref().map(rows))?;
        d.set_item("emotion", out.emotion_probs.as_ref().map(rows))?;
        Ok(d)
    }

    /// `{pair_label: (N1, N2)}` softmax attention maps for one video.
    fn attention<'py>(
        &self,
        py: Python<'py>,
        dataset: &PyDataset,
        video_id: &str,
    ) -> PyResult<Bound<'py, PyDict>> {
        let out = model::infer(video(&dataset.inner, video_id)?, &self.params, &self.config)
            .map_err(value_err)?;
        let d = PyDict::new(py);
        for (label, pair) in &out.attention {
            d.set_item(label, (rows(&pair.n1), rows(&pair.n2)))?;
        }
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(mode={}, modalities={}, parameters={})",
            self.config.mode,
            self.config.modalities.label(),
            self.params.num_scalars()
        )
    }
}

/// CIM attention of two `u x k` matrices. Returns a dict of every
/// intermediate (`m1`, `n1`, `o1`, `a1`, the same with 2, and `output`).
#[pyfunction]
fn cim_attention<'py>(
    py: Python<'py>,
    x: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
) -> PyResult<Bound<'py, PyDict>> {
    let p = attention::cim_attention(&tensor(x)?, &tensor(y)?).map_err(value_err)?;
    let d = PyDict::new(py);
    for (k, t) in [
        ("m1", &p.m1),
        ("m2", &p.m2),
        ("n1", &p.n1),
        ("n2", &p.n2),
        ("o1", &p.o1),
        ("o2", &p.o2),
        ("a1", &p.a1),
        ("a2", &p.a2),
        ("output", &p.output),
    ] {
        d.set_item(k, rows(t))?;
    }
    Ok(d)
}

/// Precision, recall, F1, accuracy and confusion counts.
#[pyfunction]
fn binary_scores<'py>(
    py: Python<'py>,
    pred: Vec<bool>,
    gold: Vec<bool>,
) -> PyResult<Bound<'py, PyAny>> {
    let s = metrics::binary_prf(&pred, &gold).map_err(value_err)?;
    serialize(py, &s)
}

/// Balanced accuracy; `None` when gold holds a single class.
#[pyfunction]
fn weighted_accuracy(pred: Vec<bool>, gold: Vec<bool>) -> PyResult<Option<f64>> {
    metrics::weighted_accuracy(&pred, &gold).map_err(value_err)
}

/// Multi-label emotion report for `u x 7` probabilities and gold bits.
#[pyfunction]
#[pyo3(signature = (probs, gold, thresholds=(0.4, 0.2)))]
fn emotion_report<'py>(
    py: Python<'py>,
    probs: Vec<[f64; 7]>,
    gold: Vec<[u8; 7]>,
    thresholds: (f64, f64),
) -> PyResult<Bound<'py, PyAny>> {
    let t = Thresholds {
        f1: thresholds.0,
        wacc: thresholds.1,
    };
    let r = metrics::multilabel_report(&probs, &gold, t).map_err(value_err)?;
    serialize(py, &r)
}

#[pymodule]
pub fn mtmm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(cim_attention, m)?)?;
    m.add_function(wrap_pyfunction!(binary_scores, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(emotion_report, m)?)?;
    m.add("EMOTIONS", data::EMOTION_NAMES.to_vec())?;
    Ok(())
}

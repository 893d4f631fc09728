//! Python bindings: expose the encoder, the attribution pipeline, and the
//! evaluation harness as a native module.
//!
//! ```python
//! import calig_py as cp
//! data = cp.generate_dataset(n_examples=200, seed=0)
//! model = cp.Model.train(data, num_layers=2, num_heads=4, hidden_dim=32, seed=0)
//! result = cp.explain(model, data[0]["token_ids"], steps=50, lam=1.0)
//! ```

use calig::attribution::{self, AttributionConfig, Normalization, RelevancePairing};
use calig::encoder::{
    load_checkpoint, save_checkpoint, train_synthetic, EncoderModel, TrainConfig,
};
use calig::error::CaligError;
use calig::eval::{
    self, generate_synthetic, BenchmarkConfig, Method, PerturbMode, RationaleExample,
    SyntheticConfig,
};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use std::path::Path;
use std::str::FromStr;

fn err(e: CaligError) -> PyErr {
    match &e {
        CaligError::Io(_) | CaligError::Parse { .. } | CaligError::Integrity { .. } => {
            PyIOError::new_err(e.to_string())
        }
        CaligError::Config(_) | CaligError::Contract(_) | CaligError::Input(_)
        | CaligError::Shape { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn parse_norm(s: &str) -> PyResult<Normalization> {
    match s {
        "symmetric_minmax" => Ok(Normalization::SymmetricMinMax),
        "l1" => Ok(Normalization::L1),
        other => Err(PyValueError::new_err(format!("unknown normalization '{other}'"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn attribution_config(
    model: &EncoderModel,
    target_class: Option<usize>,
    predicted: usize,
    steps: usize,
    lam: f64,
    norm: &str,
    rollout_range: Option<(usize, usize)>,
    last_layer_only: bool,
) -> PyResult<AttributionConfig> {
    let mut cfg = AttributionConfig::new(target_class.unwrap_or(predicted));
    cfg.steps = steps;
    cfg.lambda = lam;
    cfg.normalization = parse_norm(norm)?;
    cfg.rollout_range = rollout_range;
    if last_layer_only {
        let layers = model.config.num_layers;
        cfg.pairing = RelevancePairing::Fixed(layers);
        cfg.rollout_range = Some((layers, layers));
    }
    Ok(cfg)
}

/// A trained encoder classifier.
#[pyclass(name = "Model")]
pub struct PyModel {
    inner: EncoderModel,
}

#[pymethods]
impl PyModel {
    /// Train on a dataset of `{"token_ids", "label"}` dicts.
    #[staticmethod]
    #[pyo3(signature = (dataset, *, num_layers=2, num_heads=4, hidden_dim=32,
                        vocab_size=64, max_seq_len=24, num_classes=2,
                        epochs=3, learning_rate=1e-3, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        dataset: &Bound<'_, PyList>,
        num_layers: usize,
        num_heads: usize,
        hidden_dim: usize,
        vocab_size: usize,
        max_seq_len: usize,
        num_classes: usize,
        epochs: usize,
        learning_rate: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let pairs = extract_pairs(dataset)?;
        let config = calig::encoder::EncoderConfig {
            num_layers,
            num_heads,
            hidden_dim,
            ff_dim: hidden_dim * 2,
            vocab_size,
            max_seq_len,
            num_classes,
            cls_token_id: 1,
            pad_token_id: 0,
        };
        let hp = TrainConfig { epochs, learning_rate, seed };
        let (model, _) = train_synthetic(&config, &pairs, &hp).map_err(err)?;
        Ok(PyModel { inner: model })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyModel { inner: load_checkpoint(Path::new(path)).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.inner, Path::new(path)).map_err(err)
    }

    /// Forward pass: returns `(logits, predicted_class)`.
    fn forward(&self, token_ids: Vec<usize>) -> PyResult<(Vec<f64>, usize)> {
        let trace = self.inner.forward(&token_ids).map_err(err)?;
        Ok((trace.logits.values, trace.predicted_class))
    }

    /// Fraction of `{"token_ids", "label"}` records predicted correctly.
    fn accuracy(&self, dataset: &Bound<'_, PyList>) -> PyResult<f64> {
        let pairs = extract_pairs(dataset)?;
        calig::encoder::accuracy(&self.inner, &pairs).map_err(err)
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.config.num_layers
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(layers={}, heads={}, dim={}, vocab={}, classes={})",
            c.num_layers, c.num_heads, c.hidden_dim, c.vocab_size, c.num_classes
        )
    }
}

fn extract_pairs(dataset: &Bound<'_, PyList>) -> PyResult<Vec<(Vec<usize>, usize)>> {
    let mut out = Vec::with_capacity(dataset.len());
    for item in dataset.iter() {
        let d = item.cast::<PyDict>()?;
        let ids: Vec<usize> = d
            .get_item("token_ids")?
            .ok_or_else(|| PyValueError::new_err("record missing 'token_ids'"))?
            .extract()?;
        let label: usize = d
            .get_item("label")?
            .ok_or_else(|| PyValueError::new_err("record missing 'label'"))?
            .extract()?;
        out.push((ids, label));
    }
    Ok(out)
}

/// Generate the planted-keyword dataset as a list of dicts.
#[pyfunction]
#[pyo3(signature = (*, vocab_size=64, seq_len=24, num_classes=2,
                    keywords_per_class=2, n_examples=100, seed=0))]
fn generate_dataset(
    py: Python<'_>,
    vocab_size: usize,
    seq_len: usize,
    num_classes: usize,
    keywords_per_class: usize,
    n_examples: usize,
    seed: u64,
) -> PyResult<Py<PyAny>> {
    let cfg = SyntheticConfig {
        vocab_size,
        seq_len,
        num_classes,
        keywords_per_class,
        n_examples,
        seed,
    };
    let examples = generate_synthetic(&cfg).map_err(err)?;
    let list = PyList::empty(py);
    for ex in examples {
        list.append(example_dict(py, &ex)?)?;
    }
    Ok(list.into_pyobject(py)?.into_any().unbind())
}

fn example_dict<'py>(py: Python<'py>, ex: &RationaleExample) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("id", &ex.id)?;
    d.set_item("token_ids", &ex.token_ids)?;
    d.set_item("label", ex.label)?;
    d.set_item("rationale_mask", &ex.rationale_mask)?;
    Ok(d)
}

/// Run the full attribution pipeline on one input. Returns a dict with
/// token_scores, the rollout map and its signed parts, and the per-layer
/// relevance vectors.
#[pyfunction]
#[pyo3(signature = (model, token_ids, *, target_class=None, steps=50, lam=1.0,
                    norm="symmetric_minmax", rollout_range=None, last_layer_only=false))]
#[allow(clippy::too_many_arguments)]
fn explain(
    py: Python<'_>,
    model: &PyModel,
    token_ids: Vec<usize>,
    target_class: Option<usize>,
    steps: usize,
    lam: f64,
    norm: &str,
    rollout_range: Option<(usize, usize)>,
    last_layer_only: bool,
) -> PyResult<Py<PyAny>> {
    let trace = model.inner.forward(&token_ids).map_err(err)?;
    let cfg = attribution_config(
        &model.inner,
        target_class,
        trace.predicted_class,
        steps,
        lam,
        norm,
        rollout_range,
        last_layer_only,
    )?;
    let res = attribution::explain_trace(&model.inner, &trace, &cfg).map_err(err)?;

    let s = token_ids.len();
    let as_rows = |t: &calig::tensor::Tensor| -> Vec<Vec<f64>> {
        t.values.chunks(s).map(|r| r.to_vec()).collect()
    };
    let d = PyDict::new(py);
    d.set_item("token_ids", &res.token_ids)?;
    d.set_item("token_scores", &res.token_scores)?;
    d.set_item("predicted_class", trace.predicted_class)?;
    d.set_item("target_class", res.config.target_class)?;
    d.set_item("rollout", as_rows(&res.rollout))?;
    d.set_item("positive", as_rows(&res.positive))?;
    d.set_item("negative", as_rows(&res.negative))?;
    d.set_item("special_mask", &res.special_mask)?;
    let layers = PyDict::new(py);
    for lr in &res.layer_relevance {
        layers.set_item(lr.layer, &lr.relevance)?;
    }
    d.set_item("layer_relevance", layers)?;
    d.set_item("model_fingerprint", &res.model_fingerprint)?;
    Ok(d.into_pyobject(py)?.into_any().unbind())
}

/// Token scores from one of the comparison explainers
/// (`ig`, `ixg`, `attn_rollout`, `attn_last`, `calig`, `caig_last`).
#[pyfunction]
#[pyo3(signature = (model, token_ids, method, *, target_class=None, steps=50,
                    lam=1.0, norm="symmetric_minmax"))]
#[allow(clippy::too_many_arguments)]
fn explain_with_method(
    model: &PyModel,
    token_ids: Vec<usize>,
    method: &str,
    target_class: Option<usize>,
    steps: usize,
    lam: f64,
    norm: &str,
) -> PyResult<Vec<f64>> {
    let m = Method::from_str(method).map_err(err)?;
    if m == Method::Random {
        return Err(PyValueError::new_err("random is a benchmark-only baseline"));
    }
    let trace = model.inner.forward(&token_ids).map_err(err)?;
    let target = target_class.unwrap_or(trace.predicted_class);
    let bench = BenchmarkConfig {
        steps,
        lambda: lam,
        normalization: parse_norm(norm)?,
        ..BenchmarkConfig::default()
    };
    eval::method_scores(&model.inner, &trace, m, target, &bench).map_err(err)
}

/// Token-F1 of scores against a gold rationale mask at percent `p`.
#[pyfunction]
fn token_f1(scores: Vec<f64>, mask: Vec<bool>, special: Vec<bool>, p: f64) -> PyResult<f64> {
    eval::token_f1(&scores, &mask, &special, p).map_err(err)
}

/// Insertion/deletion AUC for a score ranking on one input.
#[pyfunction]
#[pyo3(signature = (model, token_ids, scores, mode, *, target_class))]
fn perturbation_auc(
    model: &PyModel,
    token_ids: Vec<usize>,
    scores: Vec<f64>,
    mode: &str,
    target_class: usize,
) -> PyResult<f64> {
    let mode = match mode {
        "insertion" => PerturbMode::Insertion,
        "deletion" => PerturbMode::Deletion,
        other => return Err(PyValueError::new_err(format!("unknown mode '{other}'"))),
    };
    eval::perturbation_auc(&model.inner, &token_ids, &scores, mode, target_class).map_err(err)
}

/// Per-layer sensitivity profile as a list of dicts.
#[pyfunction]
#[pyo3(signature = (model, token_ids, *, target_class=None, steps=50))]
fn layer_profile(
    py: Python<'_>,
    model: &PyModel,
    token_ids: Vec<usize>,
    target_class: Option<usize>,
    steps: usize,
) -> PyResult<Py<PyAny>> {
    let trace = model.inner.forward(&token_ids).map_err(err)?;
    let mut cfg = AttributionConfig::new(target_class.unwrap_or(trace.predicted_class));
    cfg.steps = steps;
    let records =
        attribution::profile::layer_sensitivity_profile_trace(&model.inner, &trace, &cfg)
            .map_err(err)?;
    let list = PyList::empty(py);
    for r in records {
        let d = PyDict::new(py);
        d.set_item("layer", r.layer)?;
        d.set_item("relevance_norm", r.relevance_norm)?;
        d.set_item("classifier_contribution", r.classifier_contribution)?;
        d.set_item("cls_contribution", r.cls_contribution)?;
        d.set_item("mean_cls_attention", r.mean_cls_attention)?;
        list.append(d)?;
    }
    Ok(list.into_pyobject(py)?.into_any().unbind())
}

#[pymodule]
fn calig_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(explain, m)?)?;
    m.add_function(wrap_pyfunction!(explain_with_method, m)?)?;
    m.add_function(wrap_pyfunction!(token_f1, m)?)?;
    m.add_function(wrap_pyfunction!(perturbation_auc, m)?)?;
    m.add_function(wrap_pyfunction!(layer_profile, m)?)?;
    Ok(())
}

//! Python bindings: models, pruning, the schedule functions and the CLI.
//!
//! Everything runs in 32-bit floats. Token batches are lists of equal-length
//! integer lists; logits come back as nested lists `[batch][seq][vocab]`.

use std::path::PathBuf;

use pat_core::checkpoint::{load_model, load_pruned, save_model, save_pruned};
use pat_core::cli::{initial_model, prune_model};
use pat_core::config::RunConfig;
use pat_core::evalbench::{verify_equivalence as verify, ModeView};
use pat_core::model::{ForwardMode, ModelState, PrunedModel, TokenBatch};
use pat_core::sparsify::{self, UnifiedMask};
use pat_core::trainer::{self, Silent};
use pat_core::{Error, Tape, Tensor};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(pat_py, PatError, PyException);

/// Config and input problems become `ValueError`; everything else `PatError`.
fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Input(_) | Error::Tensor(_) | Error::Json(_) => PyValueError::new_err(e.to_string()),
        other => PatError::new_err(other.to_string()),
    }
}

fn batch(tokens: Vec<Vec<usize>>) -> PyResult<TokenBatch> {
    TokenBatch::from_rows(&tokens).map_err(to_py)
}

fn nest(t: &Tensor<f32>) -> Vec<Vec<Vec<f32>>> {
    let s = t.shape();
    t.data()
        .chunks(s[1] * s[2])
        .map(|b| b.chunks(s[2]).map(<[f32]>::to_vec).collect())
        .collect()
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

/// A trainable model with its mask, sparsifiers and adapters.
#[pyclass(name = "Model", module = "pat_py")]
struct PyModel {
    inner: ModelState<f32>,
    config: Option<RunConfig>,
}

#[pymethods]
impl PyModel {
    /// Builds a fresh model from a run configuration given as JSON text.
    #[new]
    fn new(config_json: &str) -> PyResult<Self> {
        let config = RunConfig::from_json(config_json).map_err(to_py)?;
        let inner = initial_model::<f32>(&config).map_err(to_py)?;
        Ok(PyModel {
            inner,
            config: Some(config),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_model::<f32>(&path).map_err(to_py)?;
        Ok(PyModel { inner, config: None })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let total = self.config.as_ref().map(|c| c.train.total_steps);
        save_model(&path, &self.inner, total).map_err(to_py)?;
        Ok(())
    }

    /// Trains with the configuration the model was built from and returns
    /// one dict of metrics per step.
    fn train<'py>(&mut self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let config = self
            .config
            .as_ref()
            .ok_or_else(|| PatError::new_err("models loaded from disk carry no training configuration"))?;
        let inner = &mut self.inner;
        let log = py
            .detach(|| {
                let corpus = config.data.source.ingest(config.data_seed())?;
                trainer::train(inner, &corpus, &config.train, &mut Silent)
            })
            .map_err(to_py)?;
        log.iter()
            .map(|m| {
                let d = PyDict::new(py);
                d.set_item("step", m.step)?;
                d.set_item("lr", m.lr)?;
                d.set_item("loss_total", m.loss_total)?;
                d.set_item("loss_instruct", m.loss_instruct)?;
                d.set_item("loss_active", m.loss_active)?;
                d.set_item("loss_identity", m.loss_identity)?;
                d.set_item("tau", m.tau)?;
                d.set_item("beta", m.beta)?;
                d.set_item("active_count", m.active_count)?;
                Ok(d)
            })
            .collect()
    }

    /// Logits for a batch of token rows, in masked (default) or plain mode.
    #[pyo3(signature = (tokens, masked = true))]
    fn forward(&self, py: Python<'_>, tokens: Vec<Vec<usize>>, masked: bool) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let b = batch(tokens)?;
        let mode = if masked { ForwardMode::Masked } else { ForwardMode::Plain };
        let logits = py.detach(|| self.inner.forward(&b, mode)).map_err(to_py)?;
        Ok(nest(&logits))
    }

    /// Snaps the mask, merges adapters and sparsifiers, slices the hidden
    /// dimension and returns `(pruned_model, report)`. The model itself is
    /// left untouched.
    #[pyo3(signature = (seed = 0))]
    fn prune<'py>(&self, py: Python<'py>, seed: u64) -> PyResult<(PyPrunedModel, Bound<'py, PyAny>)> {
        let model = self.inner.clone();
        let p = py.detach(|| prune_model(model, seed)).map_err(to_py)?;
        let report = serde_json::to_string(&p.report).map_err(|e| to_py(e.into()))?;
        Ok((PyPrunedModel { inner: p.pruned }, json_to_py(py, &report)?))
    }

    /// Gate values `sigmoid(tau·W_M) + beta` at `step` (default: the
    /// model's current step).
    #[pyo3(signature = (step = None))]
    fn gate_values(&self, step: Option<usize>) -> Vec<f32> {
        self.inner.mask.gate_values(step.unwrap_or(self.inner.mask.step))
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model()
    }

    #[getter]
    fn step(&self) -> usize {
        self.inner.mask.step
    }

    #[getter]
    fn active_count(&self) -> usize {
        self.inner.mask.active_count()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.base_param_count()
    }

    #[getter]
    fn trainable_param_count(&self) -> usize {
        self.inner.trainable_param_count()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(d_model={}, n_layers={}, vocab_size={}, step={})",
            c.d_model, c.n_layers, c.vocab_size, self.inner.mask.step
        )
    }
}

/// A sliced, plain dense decoder.
#[pyclass(name = "PrunedModel", module = "pat_py")]
struct PyPrunedModel {
    inner: PrunedModel<f32>,
}

#[pymethods]
impl PyPrunedModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_pruned::<f32>(&path).map_err(to_py)?;
        Ok(PyPrunedModel { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_pruned(&path, &self.inner).map_err(to_py)?;
        Ok(())
    }

    fn forward(&self, py: Python<'_>, tokens: Vec<Vec<usize>>) -> PyResult<Vec<Vec<Vec<f32>>>> {
        let b = batch(tokens)?;
        let logits = py.detach(|| self.inner.forward(&b)).map_err(to_py)?;
        Ok(nest(&logits))
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.source.d_model
    }

    #[getter]
    fn d_kept(&self) -> usize {
        self.inner.d_kept()
    }

    /// Indices of the hidden channels that survived.
    #[getter]
    fn kept(&self) -> Vec<usize> {
        self.inner.kept.kept().to_vec()
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    fn __repr__(&self) -> String {
        format!("PrunedModel(d={}, d_kept={})", self.inner.source.d_model, self.inner.d_kept())
    }
}

/// Max L-infinity logit difference between the snapped-masked form of
/// `model` and `pruned` over `n_inputs` random sequences.
#[pyfunction]
#[pyo3(signature = (model, pruned, n_inputs = 32, seq_len = None, seed = 0))]
fn verify_equivalence(
    py: Python<'_>,
    model: &PyModel,
    pruned: &PyPrunedModel,
    n_inputs: usize,
    seq_len: Option<usize>,
    seed: u64,
) -> PyResult<f64> {
    let mut merged = model.inner.clone();
    let seq = seq_len.unwrap_or(merged.config.max_seq_len.min(64));
    py.detach(|| {
        if merged.snapped.is_none() {
            pat_core::pruner::merge_all(&mut merged, &pruned.inner.kept)?;
        }
        verify(&ModeView::masked(&merged), &pruned.inner, n_inputs, seq, seed)
    })
    .map_err(to_py)
}

/// Mask temperature `tau(s)`.
#[pyfunction]
#[pyo3(signature = (s, s0, eps_temp = sparsify::DEFAULT_EPS_TEMP))]
fn temperature(s: usize, s0: usize, eps_temp: f64) -> PyResult<f64> {
    sparsify::temperature(s, s0, eps_temp).map_err(to_py)
}

/// Mask offset `beta(s)`.
#[pyfunction]
fn offset(s: usize, s0: usize) -> f64 {
    sparsify::offset(s, s0)
}

/// Gate values for proxy weights `w` at step `s`.
#[pyfunction]
#[pyo3(signature = (w, s, s0, eps_temp = sparsify::DEFAULT_EPS_TEMP))]
fn gate(w: Vec<f64>, s: usize, s0: usize, eps_temp: f64) -> PyResult<Vec<f64>> {
    let n = w.len();
    let mask = UnifiedMask::with_weights(Tensor::vector(w), s0, eps_temp, n).map_err(to_py)?;
    Ok(mask.gate_values(s))
}

/// Trainable parameters of one low-rank-plus-identity sparsifier.
#[pyfunction]
fn hio_param_count(d: usize, r: usize) -> usize {
    sparsify::hio_param_count(d, r)
}

#[pyfunction]
fn cosine_lr(t: usize, total: usize, lr_max: f64) -> f64 {
    trainer::cosine_lr(t, total, lr_max)
}

/// Row-wise RMSNorm of `x` with gains `gain`.
#[pyfunction]
#[pyo3(signature = (x, gain, eps = 1e-6))]
fn rmsnorm(x: Vec<Vec<f64>>, gain: Vec<f64>, eps: f64) -> PyResult<Vec<Vec<f64>>> {
    let d = gain.len();
    let rows = x.len();
    let flat: Vec<f64> = x.into_iter().flatten().collect();
    let t = Tensor::new(vec![rows, d], flat).map_err(|e| to_py(e.into()))?;
    let mut tape = Tape::<f64>::inference();
    let xv = tape.constant(t);
    let gv = tape.constant(Tensor::vector(gain));
    let y = tape.rmsnorm(xv, gv, eps).map_err(|e| to_py(e.into()))?;
    Ok(tape.value(y).data().chunks(d.max(1)).map(<[f64]>::to_vec).collect())
}

/// Runs the `pat` command line with `args` (without the program name) and
/// returns its exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("pat".to_string()).chain(args).collect();
    py.detach(|| pat_core::cli::run(argv))
}

#[pymodule]
fn pat_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PatError", m.py().get_type::<PatError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPrunedModel>()?;
    m.add_function(wrap_pyfunction!(verify_equivalence, m)?)?;
    m.add_function(wrap_pyfunction!(temperature, m)?)?;
    m.add_function(wrap_pyfunction!(offset, m)?)?;
    m.add_function(wrap_pyfunction!(gate, m)?)?;
    m.add_function(wrap_pyfunction!(hio_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_lr, m)?)?;
    m.add_function(wrap_pyfunction!(rmsnorm, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}

//! Python bindings: model construction, tokenization, RoPE helpers, cache
//! pools, ranking, entropy probing and end-to-end answers.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use shotcache::probe::select_shot_count as select_count;
use shotcache::tinylm::{self, NO, YES};
use shotcache::{BenchMode, EntropyTrace, Error, ShotPolicy};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// `str` is taken as UTF-8; `bytes` are used as-is.
#[derive(FromPyObject)]
enum Text {
    Str(String),
    Bytes(Vec<u8>),
}

impl Text {
    fn into_bytes(self) -> Vec<u8> {
        match self {
            Text::Str(s) => s.into_bytes(),
            Text::Bytes(b) => b,
        }
    }
}

#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: shotcache::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (layers=2, heads=4, head_dim=8, seed=42, rope_base=10_000.0, max_position=4096))]
    fn new(layers: usize, heads: usize, head_dim: usize, seed: u64, rope_base: f64, max_position: usize) -> Self {
        let mut inner = shotcache::ModelConfig::new(layers, heads, head_dim, seed).with_max_position(max_position);
        inner.rope_base = rope_base;
        Self { inner }
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.num_layers
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.num_heads
    }

    #[getter]
    fn head_dim(&self) -> usize {
        self.inner.head_dim
    }

    #[getter]
    fn hidden_dim(&self) -> usize {
        self.inner.hidden_dim
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.weight_seed
    }

    #[getter]
    fn rope_base(&self) -> f64 {
        self.inner.rope_base
    }

    #[getter]
    fn max_position(&self) -> usize {
        self.inner.max_position
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(layers={}, heads={}, head_dim={}, seed={}, rope_base={}, max_position={})",
            c.num_layers, c.num_heads, c.head_dim, c.weight_seed, c.rope_base, c.max_position
        )
    }
}

#[pyclass(name = "Model", frozen)]
struct PyModel {
    inner: shotcache::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<PyModelConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        Ok(Self { inner: shotcache::Model::new(cfg).map_err(to_py)? })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig { inner: self.inner.config().clone() }
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint().to_string()
    }

    /// Next-token logits after a causal pass over `text` from position 0.
    fn last_logits(&self, text: Text) -> PyResult<Vec<f32>> {
        let seq = tinylm::tokenize(&text.into_bytes());
        let mask = shotcache::AttentionMask::causal(seq.len());
        let out = self.inner.forward(&seq, &mask, None).map_err(to_py)?;
        Ok(out.last_logits().to_vec())
    }
}

#[pyclass(name = "CachePool", frozen)]
struct PyCachePool {
    inner: shotcache::CachePool,
}

#[pymethods]
impl PyCachePool {
    /// Prefill every text once at origin positions.
    #[staticmethod]
    #[pyo3(signature = (model, texts, instruction=None))]
    fn build(py: Python<'_>, model: &PyModel, texts: Vec<Text>, instruction: Option<Text>) -> PyResult<Self> {
        let texts: Vec<Vec<u8>> = texts.into_iter().map(Text::into_bytes).collect();
        let instruction = instruction.map(Text::into_bytes);
        let inner = py
            .detach(|| shotcache::build_pool_with_instruction(&model.inner, &texts, instruction.as_deref()))
            .map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf, model: &PyModel) -> PyResult<Self> {
        Ok(Self { inner: shotcache::load_pool(path, &model.inner).map_err(to_py)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        shotcache::save_pool(&self.inner, path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<u64> {
        self.inner.ids().collect()
    }

    fn text(&self, example_id: u64) -> PyResult<Vec<u8>> {
        self.inner.text(example_id).map(<[u8]>::to_vec).map_err(to_py)
    }

    fn token_count(&self, example_id: u64) -> PyResult<usize> {
        self.inner.block(example_id).map(|b| b.token_count()).map_err(to_py)
    }

    #[getter]
    fn instruction_len(&self) -> usize {
        self.inner.instruction_len()
    }

    fn key_bytes(&self) -> usize {
        self.inner.key_value_count() * 4
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint().to_string()
    }
}

#[pyfunction]
fn tokenize(text: Text) -> Vec<u32> {
    tinylm::encode(&text.into_bytes())
}

#[pyfunction]
fn detokenize(tokens: Vec<u32>) -> PyResult<Vec<u8>> {
    tinylm::detokenize(&tokens).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (x, position, base=10_000.0))]
fn apply_rope(x: Vec<f32>, position: usize, base: f64) -> PyResult<Vec<f32>> {
    if !x.len().is_multiple_of(2) {
        return Err(PyValueError::new_err("vector length must be even"));
    }
    Ok(tinylm::apply_rope(&x, position, base))
}

#[pyfunction]
#[pyo3(signature = (key, delta, base=10_000.0))]
fn reencode_key(key: Vec<f32>, delta: i64, base: f64) -> PyResult<Vec<f32>> {
    if !key.len().is_multiple_of(2) {
        return Err(PyValueError::new_err("vector length must be even"));
    }
    Ok(shotcache::reencode_key(&key, delta, base))
}

/// Two-class entropy from a full logits row, or from `(yes, no)` logits.
#[pyfunction]
#[pyo3(signature = (logits, yes_token=YES, no_token=NO))]
fn probe_entropy(logits: Vec<f32>, yes_token: u32, no_token: u32) -> PyResult<f64> {
    if logits.len() == 2 {
        return shotcache::probe_entropy(&logits, 0, 1).map_err(to_py);
    }
    shotcache::probe_entropy(&logits, yes_token, no_token).map_err(to_py)
}

fn probe_config(tau: f64, step: usize, probes: usize, max_shots: usize, prompt: Option<Text>) -> PyResult<shotcache::ProbeConfig> {
    let mut cfg = shotcache::ProbeConfig { tau, step, probes_per_round: probes, max_shots, ..Default::default() };
    if let Some(p) = prompt {
        cfg.probe_prompt = p.into_bytes();
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

fn trace_dict<'py>(py: Python<'py>, trace: &EntropyTrace) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let rounds: Vec<(Vec<usize>, Vec<f64>)> =
        trace.rounds.iter().map(|r| (r.counts.clone(), r.entropies.clone())).collect();
    d.set_item("rounds", rounds)?;
    d.set_item("chosen_count", trace.chosen_count)?;
    d.set_item("fallback", trace.fallback)?;
    d.set_item("lines", trace.to_lines())?;
    Ok(d)
}

/// Run the selection schedule over recorded entropies, one list per round.
#[pyfunction]
#[pyo3(signature = (entropies, available, tau=0.65, step=4, probes=4, max_shots=32))]
fn select_shot_count<'py>(
    py: Python<'py>,
    entropies: Vec<Vec<f64>>,
    available: usize,
    tau: f64,
    step: usize,
    probes: usize,
    max_shots: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = probe_config(tau, step, probes, max_shots, None)?;
    let mut rounds = entropies.into_iter();
    let trace = select_count(&cfg, available, |counts| {
        let mut e = rounds.next().ok_or(Error::EmptyInput("recorded entropies"))?;
        e.truncate(counts.len());
        Ok(e)
    })
    .map_err(to_py)?;
    trace_dict(py, &trace)
}

fn scoring_layer(model: &PyModel, layer: Option<usize>) -> usize {
    layer.unwrap_or(model.inner.config().num_layers - 1)
}

/// Ranked `(example_id, score)` pairs, most relevant first.
#[pyfunction]
#[pyo3(signature = (model, pool, query, layer=None, top=None))]
fn rank(model: &PyModel, pool: &PyCachePool, query: Text, layer: Option<usize>, top: Option<usize>) -> PyResult<Vec<(u64, f64)>> {
    let set = shotcache::rank(&model.inner, &pool.inner, &query.into_bytes(), scoring_layer(model, layer)).map_err(to_py)?;
    let pairs = set.ranked_ids.into_iter().zip(set.scores);
    Ok(pairs.take(top.unwrap_or(usize::MAX)).collect())
}

#[pyfunction]
#[pyo3(signature = (model, pool, query, tau=0.65, step=4, probes=4, max_shots=32, layer=None, prompt=None))]
#[allow(clippy::too_many_arguments)]
fn adaptive_select<'py>(
    py: Python<'py>,
    model: &PyModel,
    pool: &PyCachePool,
    query: Text,
    tau: f64,
    step: usize,
    probes: usize,
    max_shots: usize,
    layer: Option<usize>,
    prompt: Option<Text>,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = probe_config(tau, step, probes, max_shots, prompt)?;
    let query = query.into_bytes();
    let set = shotcache::rank(&model.inner, &pool.inner, &query, scoring_layer(model, layer)).map_err(to_py)?;
    let trace = shotcache::adaptive_select(&model.inner, &pool.inner, &set.ranked_ids, &query, &cfg).map_err(to_py)?;
    let d = trace_dict(py, &trace)?;
    d.set_item("ranked_ids", set.ranked_ids)?;
    Ok(d)
}

/// Full pipeline for one query; returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (model, pool, query, tau=0.65, step=4, probes=4, max_shots=32, max_new_tokens=16, layer=None, full_prefill=false, zero_shot=false))]
#[allow(clippy::too_many_arguments)]
fn answer<'py>(
    py: Python<'py>,
    model: &PyModel,
    pool: &PyCachePool,
    query: Text,
    tau: f64,
    step: usize,
    probes: usize,
    max_shots: usize,
    max_new_tokens: usize,
    layer: Option<usize>,
    full_prefill: bool,
    zero_shot: bool,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = probe_config(tau, step, probes, max_shots, None)?;
    let engine = shotcache::Engine::new(&model.inner, &pool.inner, cfg)
        .and_then(|e| e.with_scoring_layer(scoring_layer(model, layer)))
        .map_err(to_py)?
        .with_max_new_tokens(max_new_tokens);
    let mode = if full_prefill { BenchMode::FullPrefill } else { BenchMode::Cached };
    let policy = if zero_shot { ShotPolicy::ZeroShot } else { ShotPolicy::Adaptive };
    let query = query.into_bytes();
    let report = py.detach(|| engine.answer_with(&query, mode, policy)).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("answer", report.answer.clone())?;
    d.set_item("answer_tokens", report.answer_tokens.clone())?;
    d.set_item("chosen_shots", report.chosen_shots)?;
    d.set_item("shot_ids", report.shot_ids.clone())?;
    d.set_item("trace", trace_dict(py, &report.entropy_trace)?)?;
    d.set_item("model_tokens", report.model_tokens)?;
    d.set_item("shot_tokens_recomputed", report.shot_tokens_recomputed)?;
    d.set_item("total_ms", report.timing.total_ms)?;
    d.set_item("summary", report.summary_lines())?;
    Ok(d)
}

/// Run the invariant suite; returns `(name, passed, detail)` per check.
#[pyfunction]
#[pyo3(signature = (seed=7))]
fn verify(py: Python<'_>, seed: u64) -> Vec<(String, bool, String)> {
    py.detach(|| shotcache::verify::run_suite(seed))
        .into_iter()
        .map(|c| (c.name.to_string(), c.passed, c.detail))
        .collect()
}

#[pymodule]
#[pyo3(name = "shotcache")]
fn shotcache_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCachePool>()?;
    m.add("BOS", tinylm::BOS)?;
    m.add("EOS", tinylm::EOS)?;
    m.add("YES", YES)?;
    m.add("NO", NO)?;
    m.add("VOCAB_SIZE", tinylm::VOCAB_SIZE)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(apply_rope, m)?)?;
    m.add_function(wrap_pyfunction!(reencode_key, m)?)?;
    m.add_function(wrap_pyfunction!(probe_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(select_shot_count, m)?)?;
    m.add_function(wrap_pyfunction!(rank, m)?)?;
    m.add_function(wrap_pyfunction!(adaptive_select, m)?)?;
    m.add_function(wrap_pyfunction!(answer, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}

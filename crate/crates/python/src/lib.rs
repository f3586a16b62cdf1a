// SPDX-License-Identifier: MIT OR Apache-2.0

//! Python bindings: corpus loading, model construction, training,
//! checkpoints, probes and the analysis tools.

use std::path::PathBuf;

use dstg_core::analysis::{self, DocInput, InfluenceOptions};
use dstg_core::corpus::{self, Document};
use dstg_core::model::{EncoderInput, MlmScope, Model as CoreModel, ModelConfig, Stream, Variant};
use dstg_core::probes::{self, ProbeOptions};
use dstg_core::training::{self, Checkpoint as CoreCheckpoint, TrainConfig, Trainer as CoreTrainer};
use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: dstg_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = dstg_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn to_rows(t: &dstg_core::numerics::Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("expected a non-empty rectangular matrix"));
    }
    Ok(DMatrix::from_fn(n, d, |i, j| rows[i][j]))
}

#[pyclass(module = "dstg", from_py_object)]
#[derive(Clone)]
pub struct Vocab {
    inner: corpus::Vocab,
}

#[pymethods]
impl Vocab {
    #[staticmethod]
    #[pyo3(signature = (texts, max_size = corpus::DESK_VOCAB_MAX))]
    fn build(texts: Vec<String>, max_size: usize) -> PyResult<Self> {
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        Ok(Self { inner: corpus::Vocab::build(&refs, max_size).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: corpus::Vocab::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.tokens().to_vec()
    }

    fn id(&self, token: &str) -> Option<usize> {
        self.inner.id(token)
    }

    /// Token ids of one document, `[CLS] ... [SEP]`.
    #[pyo3(signature = (text, max_len = corpus::DESK_DOC_LEN))]
    fn encode(&self, text: &str, max_len: usize) -> PyResult<Vec<usize>> {
        Ok(corpus::tokenize(text, &self.inner, max_len).map_err(err)?.ids)
    }

    fn decode(&self, ids: Vec<usize>) -> String {
        self.inner.decode(&ids)
    }

    fn is_special(&self, id: usize) -> bool {
        self.inner.is_special(id)
    }
}

/// The bundled corpus (or `dir`) cut into fixed-length documents.
#[pyfunction]
#[pyo3(signature = (dir = None))]
fn desk_corpus(dir: Option<PathBuf>) -> PyResult<(Vocab, Vec<Vec<usize>>)> {
    let dir = dir.unwrap_or_else(corpus::bundled_corpus_dir);
    let (vocab, docs) = corpus::desk_corpus(&dir).map_err(err)?;
    Ok((Vocab { inner: vocab }, docs.into_iter().map(|d| d.ids).collect()))
}

fn doc(ids: Vec<usize>) -> Document {
    let offsets = vec![(0, 0); ids.len()];
    Document { ids, offsets }
}

fn documents(ids: Vec<Vec<usize>>, vocab: &corpus::Vocab, max_len: usize) -> PyResult<Vec<Document>> {
    ids.into_iter()
        .map(|ids| {
            let d = doc(ids);
            d.validate(vocab, max_len).map_err(err)?;
            Ok(d)
        })
        .collect()
}

#[pyclass(module = "dstg", from_py_object)]
#[derive(Clone)]
pub struct Model {
    inner: CoreModel<f32>,
}

#[pymethods]
impl Model {
    /// Default-sized encoder; `variant` is dstg, ap, rp or rope.
    #[new]
    #[pyo3(signature = (vocab_size, variant = "dstg", mlm_scope = "semantic_only", seed = 0))]
    fn new(vocab_size: usize, variant: &str, mlm_scope: &str, seed: u64) -> PyResult<Self> {
        let c = training::desk_model(parse(variant)?, parse(mlm_scope)?, vocab_size);
        Ok(Self { inner: CoreModel::init(c, seed).map_err(err)? })
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.config.variant.name()
    }

    #[getter]
    fn mlm_scope(&self) -> &'static str {
        self.inner.config.mlm_scope.name()
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.config.layers
    }

    #[getter]
    fn heads(&self) -> usize {
        self.inner.config.heads
    }

    #[getter]
    fn d_ap(&self) -> usize {
        self.inner.config.d_ap
    }

    #[getter]
    fn d_sem(&self) -> usize {
        self.inner.config.d_sem
    }

    #[getter]
    fn max_positions(&self) -> usize {
        self.inner.config.max_positions
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }

    fn parameter_count(&self) -> usize {
        self.inner.config.parameter_count()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.inner.params.names()
    }

    /// Flat values and shape of one parameter.
    fn parameter(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f32>)> {
        let t = self.inner.params.get(name).map_err(err)?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    /// Hidden state of every layer (0 is the embedding output) for one
    /// document at positions `shift..shift+n`.
    #[pyo3(signature = (ids, vocab, stream = "all", shift = 0))]
    fn hidden_states(&self, ids: Vec<usize>, vocab: &Vocab, stream: &str, shift: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let stream: Stream = parse(stream)?;
        let positions: Vec<usize> = (shift..shift + ids.len()).collect();
        let special: Vec<bool> = ids.iter().map(|&i| vocab.inner.is_special(i)).collect();
        let input = EncoderInput { ids: &ids, positions: &positions, special: &special };
        let ins = self.inner.cast::<f64>().inspect(&input).map_err(err)?;
        ins.states
            .iter()
            .map(|s| stream.select(s).map(|t| to_rows(&t)).ok_or_else(|| PyValueError::new_err("model has no AP stream")))
            .collect()
    }

    /// Attention probabilities of every head in `layer`.
    fn attention(&self, ids: Vec<usize>, vocab: &Vocab, layer: usize) -> PyResult<Vec<Vec<Vec<f64>>>> {
        let input = DocInput::new(&doc(ids), &vocab.inner);
        let ins = self.inner.cast::<f64>().inspect(&input.input()).map_err(err)?;
        let heads = ins.heads.get(layer).ok_or_else(|| PyValueError::new_err(format!("no layer {layer}")))?;
        Ok(heads.iter().map(|h| to_rows(&h.probs)).collect())
    }

    /// Rows of the absolute-position table (DSTG and AP variants).
    fn position_table(&self) -> PyResult<Vec<Vec<f64>>> {
        Ok(to_rows(&analysis::position_table(&self.inner).map_err(err)?.cast::<f64>()))
    }

    fn __repr__(&self) -> String {
        format!("Model({}, {} parameters)", self.inner.config.label(), self.inner.config.parameter_count())
    }
}

#[pyclass(module = "dstg", from_py_object)]
#[derive(Clone)]
pub struct Checkpoint {
    inner: CoreCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: training::load_checkpoint(&dir).map_err(err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        training::save_checkpoint(&dir, &self.inner).map_err(err)
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step
    }

    #[getter]
    fn model(&self) -> Model {
        Model { inner: self.inner.model.clone() }
    }

    #[getter]
    fn vocab(&self) -> Option<Vocab> {
        self.inner.vocab.clone().map(|inner| Vocab { inner })
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(module = "dstg")]
pub struct Trainer {
    inner: CoreTrainer,
}

fn train_config(steps: u64, batch_size: usize, peak_lr: f64, warmup_steps: Option<u64>, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::desk();
    c.steps = steps;
    c.batch_size = batch_size;
    c.peak_lr = peak_lr;
    c.warmup_steps = warmup_steps.unwrap_or(c.warmup_steps.min(steps));
    c.seed = seed;
    c
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (vocab, docs, variant = "dstg", mlm_scope = "semantic_only", steps = 300, batch_size = 64,
                        peak_lr = 3e-3, warmup_steps = None, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        vocab: &Vocab,
        docs: Vec<Vec<usize>>,
        variant: &str,
        mlm_scope: &str,
        steps: u64,
        batch_size: usize,
        peak_lr: f64,
        warmup_steps: Option<u64>,
        seed: u64,
    ) -> PyResult<Self> {
        let v: Variant = parse(variant)?;
        let s: MlmScope = parse(mlm_scope)?;
        let mc: ModelConfig = training::desk_model(v, s, vocab.inner.len());
        let docs = documents(docs, &vocab.inner, mc.max_positions)?;
        let tc = train_config(steps, batch_size, peak_lr, warmup_steps, seed);
        Ok(Self { inner: CoreTrainer::new(mc, tc, &vocab.inner, docs).map_err(err)? })
    }

    /// Continues from a checkpoint with its stored training settings.
    #[staticmethod]
    fn resume(ckpt: &Checkpoint, vocab: &Vocab, docs: Vec<Vec<usize>>) -> PyResult<Self> {
        let docs = documents(docs, &vocab.inner, ckpt.inner.model.config.max_positions)?;
        Ok(Self { inner: CoreTrainer::from_checkpoint(ckpt.inner.clone(), &vocab.inner, docs).map_err(err)? })
    }

    /// One update; returns `(step, lr, loss)`.
    fn step(&mut self, py: Python<'_>) -> PyResult<(u64, f64, f64)> {
        let r = py.detach(|| self.inner.step()).map_err(err)?;
        Ok((r.step, r.lr, r.loss))
    }

    #[pyo3(signature = (until = None))]
    fn run(&mut self, py: Python<'_>, until: Option<u64>) -> PyResult<()> {
        let until = until.unwrap_or(self.inner.config().steps);
        py.detach(|| self.inner.run_until(until)).map_err(err)
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.step_count()
    }

    fn losses(&self) -> Vec<f64> {
        self.inner.trace().iter().map(|r| r.loss).collect()
    }

    #[getter]
    fn model(&self) -> Model {
        Model { inner: self.inner.model().clone() }
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint { inner: self.inner.checkpoint() }
    }
}

#[pyfunction]
#[pyo3(signature = (rel, num_buckets = 32, max_distance = 128))]
fn t5_bucket(rel: i64, num_buckets: usize, max_distance: usize) -> usize {
    dstg_core::positional::t5_bucket(rel, num_buckets, max_distance)
}

#[pyfunction]
fn kl_divergence(p: Vec<f64>, q: Vec<f64>) -> PyResult<f64> {
    if p.len() != q.len() {
        return Err(PyValueError::new_err("distributions differ in length"));
    }
    Ok(analysis::kl_divergence(&p, &q))
}

#[pyfunction]
fn dct_power_shares(signal: Vec<f64>) -> Vec<f64> {
    analysis::dct_power_shares(&signal)
}

/// PCA of a position table with a DCT of each component; returns
/// `(variance_ratio, lowfreq_share)`.
#[pyfunction]
fn embedding_spectrum(rows: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let r = analysis::embedding_spectrum(&to_matrix(&rows)?);
    Ok((r.variance_ratio, r.lowfreq_share))
}

/// Ridge regression with an unpenalised intercept; returns `(weights, bias)`.
#[pyfunction]
fn ridge_fit(x: Vec<Vec<f64>>, y: Vec<f64>, lam: f64) -> PyResult<(Vec<f64>, f64)> {
    let fit = probes::ridge_fit(&to_matrix(&x)?, &y, lam).map_err(err)?;
    Ok((fit.weights, fit.intercept))
}

#[pyfunction]
fn r2(pred: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    probes::r2(&pred, &y).map_err(err)
}

/// Influence of each component on every head as
/// `(layer, head, raw[sem, ap, rp], normalized[sem, ap, rp])`.
#[pyfunction]
#[pyo3(signature = (model, vocab, docs, include_special_rows = true))]
fn head_influence(
    model: &Model,
    vocab: &Vocab,
    docs: Vec<Vec<usize>>,
    include_special_rows: bool,
) -> PyResult<Vec<(usize, usize, [f64; 3], [f64; 3])>> {
    let inputs: Vec<DocInput> = docs.into_iter().map(|ids| DocInput::new(&doc(ids), &vocab.inner)).collect();
    let rows = analysis::head_influence_all(&model.inner, &inputs, InfluenceOptions { include_special_rows }).map_err(err)?;
    Ok(rows.into_iter().map(|r| (r.layer, r.head, r.raw, r.normalized)).collect())
}

/// Ridge probes of every layer and stream for the three targets. Returns
/// rows `(target, layer, stream, r2_mean, r2_std)`; cells that are not probed
/// carry `None`.
#[pyfunction]
#[pyo3(signature = (model, vocab, docs, seeds = 5, lam = 1.0))]
fn probe(
    py: Python<'_>,
    model: &Model,
    vocab: &Vocab,
    docs: Vec<Vec<usize>>,
    seeds: u64,
    lam: f64,
) -> PyResult<Vec<(String, usize, String, Option<f64>, Option<f64>)>> {
    let docs = documents(docs, &vocab.inner, model.inner.config.max_positions)?;
    let opts = ProbeOptions { seeds: (0..seeds).collect(), lambda: lam, ..ProbeOptions::default() };
    let label = model.inner.config.variant.name();
    let reports =
        py.detach(|| probes::probe_model(label, &model.inner, &docs, &vocab.inner, &opts)).map_err(err)?;
    let mut out = Vec::new();
    for r in &reports {
        for row in &r.rows {
            out.push((
                r.target.name().to_string(),
                row.layer,
                row.stream.name().to_string(),
                row.cell.as_ref().map(|c| c.r2_mean),
                row.cell.as_ref().map(|c| c.r2_std),
            ));
        }
    }
    Ok(out)
}

#[pymodule]
fn dstg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocab>()?;
    m.add_class::<Model>()?;
    m.add_class::<Checkpoint>()?;
    m.add_class::<Trainer>()?;
    m.add_function(wrap_pyfunction!(desk_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(t5_bucket, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(dct_power_shares, m)?)?;
    m.add_function(wrap_pyfunction!(embedding_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(ridge_fit, m)?)?;
    m.add_function(wrap_pyfunction!(r2, m)?)?;
    m.add_function(wrap_pyfunction!(head_influence, m)?)?;
    m.add_function(wrap_pyfunction!(probe, m)?)?;
    Ok(())
}

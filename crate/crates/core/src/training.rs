// SPDX-License-Identifier: MIT OR Apache-2.0

//! MLM masking, the warmup + cosine schedule, AdamW, the deterministic
//! training loop and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Document, Vocab};
use crate::error::{Error, Result};
use crate::model::{EncoderInput, ForwardOptions, MlmScope, Model, ModelConfig, Variant};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::positional::{sample_ap_shift, Positions};
use crate::rng::{step_doc_index, stream, Purpose};

/// Which tokens are corrupted and how.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskPolicy {
    /// Share of non-special tokens selected for prediction.
    pub rate: f64,
    /// Of the selected tokens: share replaced by `[MASK]`.
    pub mask_frac: f64,
    /// Of the selected tokens: share replaced by a random token. The rest stay unchanged.
    pub random_frac: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self { rate: 0.15, mask_frac: 0.8, random_frac: 0.1 }
    }
}

impl MaskPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::Config(format!("mask rate {} outside (0, 1]", self.rate)));
        }
        if self.mask_frac < 0.0 || self.random_frac < 0.0 || self.mask_frac + self.random_frac > 1.0 + 1e-12 {
            return Err(Error::Config("mask/random fractions must be non-negative and sum to at most 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Masked {
    pub ids: Vec<usize>,
    /// Original id at selected positions.
    pub labels: Vec<Option<usize>>,
}

impl Masked {
    pub fn selected(&self) -> Vec<usize> {
        (0..self.labels.len()).filter(|&i| self.labels[i].is_some()).collect()
    }
}

/// Selects `max(1, round(rate · k))` of the `k` non-special positions and
/// corrupts them according to `policy`.
pub fn mask_tokens<R: Rng + ?Sized>(
    ids: &[usize],
    special: &[bool],
    mask_id: usize,
    replacements: &[usize],
    rng: &mut R,
    policy: &MaskPolicy,
) -> Result<Masked> {
    if ids.len() != special.len() {
        return Err(Error::Shape(format!("{} ids but {} special flags", ids.len(), special.len())));
    }
    let candidates: Vec<usize> = (0..ids.len()).filter(|&i| !special[i]).collect();
    if candidates.is_empty() {
        return Err(Error::Invalid("document has no maskable tokens".into()));
    }
    if policy.random_frac > 0.0 && replacements.is_empty() {
        return Err(Error::Invalid("random replacement requested but no replacement ids".into()));
    }
    let k = ((policy.rate * candidates.len() as f64).round() as usize).clamp(1, candidates.len());
    let mut chosen: Vec<usize> = sample(rng, candidates.len(), k).into_iter().map(|c| candidates[c]).collect();
    chosen.sort_unstable();
    let mut out = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    for i in chosen {
        labels[i] = Some(ids[i]);
        let u: f64 = rng.random();
        if u < policy.mask_frac {
            out[i] = mask_id;
        } else if u < policy.mask_frac + policy.random_frac {
            out[i] = replacements[rng.random_range(0..replacements.len())];
        }
    }
    Ok(Masked { ids: out, labels })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mask: MaskPolicy,
    /// Random global shift of absolute positions, for variants with an AP table.
    pub shift_positions: bool,
    /// Steps between checks that the final AP state gets no MLM gradient
    /// (semantic-only head); 0 disables.
    pub ap_check_interval: u64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            steps: 300,
            batch_size: 64,
            peak_lr: 3e-3,
            warmup_steps: 30,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            mask: MaskPolicy::default(),
            shift_positions: true,
            ap_check_interval: 50,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.steps {
            return Err(Error::Config(format!("warmup_steps {} exceeds steps {}", self.warmup_steps, self.steps)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.peak_lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("peak_lr and weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and adam_eps be positive".into()));
        }
        self.mask.validate()
    }
}

/// Learning rate after `step` updates, for the update numbered `step` (1-based)
/// or, at 0, the initial point of the ramp.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    let (s, w, total) = (step as f64, cfg.warmup_steps as f64, cfg.steps as f64);
    if step < cfg.warmup_steps {
        return cfg.peak_lr * s / w;
    }
    if cfg.steps <= cfg.warmup_steps {
        return cfg.peak_lr;
    }
    let progress = ((s - w) / (total - w)).min(1.0);
    cfg.peak_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self { beta1: c.beta1, beta2: c.beta2, eps: c.adam_eps, weight_decay: c.weight_decay }
    }
}

/// First and second moments per parameter, in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(model: &Model<T>) -> Self {
        let m: Vec<Vec<f32>> = model.params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self { v: m.clone(), m, t: 0 }
    }
}

/// One AdamW update. Decay is decoupled: it shrinks the weights directly and
/// never enters the moment estimates. Only tensors flagged `decay` shrink.
pub fn adamw_step(
    model: &mut Model<f32>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != model.params.len() || state.m.len() != grads.len() {
        return Err(Error::Shape(format!(
            "{} gradients for {} parameters ({} moment slots)",
            grads.len(),
            model.params.len(),
            state.m.len()
        )));
    }
    for (p, g) in model.params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::Shape(format!("gradient for {} is {:?}, expected {:?}", p.name, g.shape(), p.value.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let step = (lr / bc1) as f32;
    let bc2_sqrt = bc2.sqrt() as f32;
    let eps = cfg.eps as f32;
    let lr32 = lr as f32;
    let wd = cfg.weight_decay as f32;
    for (k, p) in model.params.iter_mut().enumerate() {
        let decay = p.decay && wd > 0.0;
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        for (i, w) in p.value.data_mut().iter_mut().enumerate() {
            let gi = grads[k].data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            if decay {
                *w -= lr32 * wd * *w;
            }
            *w -= step * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

/// One masked sequence ready for the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MlmExample {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub special: Vec<bool>,
    pub labels: Vec<Option<usize>>,
}

impl MlmExample {
    pub fn input(&self) -> EncoderInput<'_> {
        EncoderInput { ids: &self.ids, positions: &self.positions, special: &self.special }
    }

    pub fn num_labels(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }
}

/// MLM loss graph for one example: the mean cross-entropy over its selected
/// tokens, with the head evaluated only on those rows.
pub struct MlmLoss {
    pub loss: Var,
    pub final_ap: Option<Var>,
    pub final_sem: Var,
}

pub fn mlm_loss<T: Scalar>(
    model: &Model<T>,
    graph: &mut Graph<T>,
    bound: &crate::model::BoundParams,
    example: &MlmExample,
) -> Result<MlmLoss> {
    let trace = model.forward(graph, bound, &example.input(), ForwardOptions::default())?;
    let rows = (0..example.labels.len()).filter(|&i| example.labels[i].is_some()).collect::<Vec<_>>();
    let fin = trace.final_state();
    let logits = model.mlm_logits(graph, bound, fin, Some(&rows))?;
    let labels: Vec<Option<usize>> = rows.iter().map(|&i| example.labels[i]).collect();
    let loss = graph.cross_entropy(logits, &labels)?;
    Ok(MlmLoss { loss, final_ap: fin.ap, final_sem: fin.sem })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

pub fn write_loss_csv(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,lr,loss\n");
    for r in records {
        out.push_str(&format!("{},{},{}\n", r.step, r.lr, r.loss));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("step,lr,loss") {
        return Err(Error::Invalid(format!("{} lacks the step,lr,loss header", path.display())));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Invalid(format!("bad loss row {l:?}"));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad())?,
                lr: f[1].parse().map_err(|_| bad())?,
                loss: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train: TrainConfig,
    pub step: u64,
    pub adam: AdamState,
    pub vocab: Option<Vocab>,
}

struct DocResult {
    loss: f64,
    count: usize,
    grads: Vec<Tensor<f32>>,
    final_ap_grad_zero: Option<bool>,
}

pub struct Trainer {
    model: Model<f32>,
    config: TrainConfig,
    docs: Vec<Document>,
    specials: Vec<Vec<bool>>,
    mask_id: usize,
    replacements: Vec<usize>,
    vocab: Option<Vocab>,
    adam: AdamState,
    step: u64,
    trace: Vec<LossRecord>,
    ap_checks: usize,
}

impl Trainer {
    /// Fresh model initialised from `config.seed`.
    pub fn new(model_config: ModelConfig, config: TrainConfig, vocab: &Vocab, docs: Vec<Document>) -> Result<Self> {
        if model_config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} but vocabulary has {} tokens",
                model_config.vocab_size,
                vocab.len()
            )));
        }
        let model = Model::init(model_config, config.seed)?;
        let adam = AdamState::new(&model);
        Self::assemble(model, config, vocab, docs, adam, 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint, vocab: &Vocab, docs: Vec<Document>) -> Result<Self> {
        if let Some(v) = &ckpt.vocab {
            if v != vocab {
                return Err(Error::Checkpoint("checkpoint was trained with a different vocabulary".into()));
            }
        }
        Self::assemble(ckpt.model, ckpt.train, vocab, docs, ckpt.adam, ckpt.step)
    }

    fn assemble(
        model: Model<f32>,
        config: TrainConfig,
        vocab: &Vocab,
        docs: Vec<Document>,
        adam: AdamState,
        step: u64,
    ) -> Result<Self> {
        config.validate()?;
        if docs.is_empty() {
            return Err(Error::Invalid("training corpus is empty".into()));
        }
        for d in &docs {
            d.validate(vocab, model.config.max_positions)?;
        }
        let specials = docs.iter().map(|d| d.special_mask(vocab)).collect();
        Ok(Self {
            model,
            config,
            docs,
            specials,
            mask_id: vocab.mask,
            replacements: vocab.replacement_ids(),
            vocab: Some(vocab.clone()),
            adam,
            step,
            trace: Vec::new(),
            ap_checks: 0,
        })
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Losses of the steps run by this trainer (not those before a resume).
    pub fn trace(&self) -> &[LossRecord] {
        &self.trace
    }

    /// How many final-AP gradient checks have run.
    pub fn ap_checks(&self) -> usize {
        self.ap_checks
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            train: self.config.clone(),
            step: self.step,
            adam: self.adam.clone(),
            vocab: self.vocab.clone(),
        }
    }

    /// The masked, shifted examples of update `step` (1-based).
    pub fn batch_for(&self, step: u64) -> Result<Vec<MlmExample>> {
        let seed = self.config.seed;
        let mut batch_rng = stream(seed, Purpose::Batch, step);
        let m = self.model.config.max_positions;
        let shifts = self.config.shift_positions && self.model.config.variant.has_ap_table();
        (0..self.config.batch_size)
            .map(|b| {
                let d = batch_rng.random_range(0..self.docs.len());
                let doc = &self.docs[d];
                let idx = step_doc_index(step, b);
                let shift = if shifts {
                    sample_ap_shift(doc.len(), m, &mut stream(seed, Purpose::Shift, idx))?
                } else {
                    0
                };
                let positions = Positions::new(doc.len(), shift, m)?.ids;
                let masked = mask_tokens(
                    &doc.ids,
                    &self.specials[d],
                    self.mask_id,
                    &self.replacements,
                    &mut stream(seed, Purpose::Mask, idx),
                    &self.config.mask,
                )?;
                Ok(MlmExample { ids: masked.ids, positions, special: self.specials[d].clone(), labels: masked.labels })
            })
            .collect()
    }

    fn run_doc(&self, ex: &MlmExample, check_ap: bool) -> Result<DocResult> {
        let mut graph = Graph::new();
        let bound = self.model.bind(&mut graph, true);
        let out = mlm_loss(&self.model, &mut graph, &bound, ex)?;
        let grads = graph.backward(out.loss)?;
        let final_ap_grad_zero = match (check_ap, out.final_ap) {
            (true, Some(ap)) => Some(grads.get_or_zeros(ap).data().iter().all(|&g| g == 0.0)),
            _ => None,
        };
        Ok(DocResult {
            loss: graph.value(out.loss).item() as f64,
            count: ex.num_labels(),
            grads: bound.vars().iter().map(|&v| grads.get_or_zeros(v)).collect(),
            final_ap_grad_zero,
        })
    }

    /// Runs one update and returns its record.
    pub fn step(&mut self) -> Result<LossRecord> {
        let step = self.step + 1;
        let batch = self.batch_for(step)?;
        let interval = self.config.ap_check_interval;
        let check_ap = interval > 0
            && (step == 1 || step % interval == 0)
            && self.model.config.has_ap_stream()
            && self.model.config.mlm_scope == MlmScope::SemanticOnly;
        let results: Vec<DocResult> = batch
            .par_iter()
            .enumerate()
            .map(|(b, ex)| self.run_doc(ex, check_ap && b == 0))
            .collect::<Result<_>>()?;
        let total: usize = results.iter().map(|r| r.count).sum();
        let mut loss = 0.0f64;
        let mut grads: Vec<Tensor<f32>> = self.model.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        for r in &results {
            let w = r.count as f64 / total as f64;
            loss += w * r.loss;
            let wf = w as f32;
            for (acc, g) in grads.iter_mut().zip(&r.grads) {
                for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += wf * x;
                }
            }
            if let Some(zero) = r.final_ap_grad_zero {
                self.ap_checks += 1;
                if !zero {
                    return Err(Error::Invalid(format!(
                        "step {step}: final AP state received MLM gradient under the semantic-only head"
                    )));
                }
            }
        }
        let lr = lr_at(step, &self.config);
        adamw_step(&mut self.model, &grads, &mut self.adam, lr, &AdamConfig::from(&self.config))?;
        self.step = step;
        let rec = LossRecord { step, lr, loss };
        self.trace.push(rec);
        Ok(rec)
    }

    /// Trains until `until` updates have been applied in total.
    pub fn run_until(&mut self, until: u64) -> Result<()> {
        while self.step < until.min(self.config.steps) {
            self.step()?;
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.steps)
    }
}

/// Full training run from initialisation.
pub fn train(
    model_config: ModelConfig,
    config: TrainConfig,
    vocab: &Vocab,
    docs: Vec<Document>,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let mut t = Trainer::new(model_config, config, vocab, docs)?;
    t.run()?;
    Ok((t.checkpoint(), t.trace.clone()))
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the tensor file.
    offset: u64,
    /// Byte length.
    len: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: u64,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    adam_t: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

/// Writes `manifest.json`, `tensors.bin` and, when known, `vocab.txt`.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes: Vec<u8> = Vec::new();
    let mut entries = Vec::new();
    let mut put = |name: String, shape: &[usize], data: &[f32]| {
        let offset = bytes.len() as u64;
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            dtype: "f32".into(),
            offset,
            len: (data.len() * 4) as u64,
        });
    };
    for p in ckpt.model.params.iter() {
        put(p.name.clone(), p.value.shape(), p.value.data());
    }
    for (k, p) in ckpt.model.params.iter().enumerate() {
        put(format!("adam.m.{}", p.name), p.value.shape(), &ckpt.adam.m[k]);
        put(format!("adam.v.{}", p.name), p.value.shape(), &ckpt.adam.v[k]);
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        model: ckpt.model.config.clone(),
        train: ckpt.train.clone(),
        step: ckpt.step,
        adam_t: ckpt.adam.t,
        rng: RngState { seed: ckpt.train.seed, step: ckpt.step },
        tensors: entries,
    };
    let tpath = dir.join(TENSORS_FILE);
    let mut f = fs::File::create(&tpath).map_err(|e| Error::io(&tpath, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tpath, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    if let Some(v) = &ckpt.vocab {
        v.save(&dir.join(VOCAB_FILE))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let probe: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    match probe.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_FORMAT_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Checkpoint(format!(
                "format version {v}, this build reads {CHECKPOINT_FORMAT_VERSION}"
            )))
        }
        None => return Err(Error::Checkpoint("manifest has no format_version".into())),
    }
    let manifest: Manifest =
        serde_json::from_value(probe).map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    let tpath = dir.join(TENSORS_FILE);
    let bytes = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;

    let mut model = Model::init(manifest.model.clone(), 0)?;
    let n = model.params.len();
    if manifest.tensors.len() != 3 * n {
        return Err(Error::Checkpoint(format!("{} tensors, expected {}", manifest.tensors.len(), 3 * n)));
    }
    let read = |e: &TensorEntry, name: &str, shape: &[usize]| -> Result<Vec<f32>> {
        if e.name != name {
            return Err(Error::Checkpoint(format!("expected tensor {name}, found {}", e.name)));
        }
        if e.shape != shape {
            return Err(Error::Checkpoint(format!("{name}: shape {:?} in manifest, model needs {shape:?}", e.shape)));
        }
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{name}: unsupported dtype {}", e.dtype)));
        }
        let numel: usize = shape.iter().product();
        let (start, len) = (e.offset as usize, e.len as usize);
        if len != numel * 4 || start.checked_add(len).is_none_or(|end| end > bytes.len()) {
            return Err(Error::Checkpoint(format!("{name}: byte range outside tensor file")));
        }
        Ok(bytes[start..start + len].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
    };
    let mut adam = AdamState::new(&model);
    adam.t = manifest.adam_t;
    for (k, p) in model.params.iter_mut().enumerate() {
        let shape = p.value.shape().to_vec();
        let data = read(&manifest.tensors[k], &p.name, &shape)?;
        p.value = Tensor::new(shape.clone(), data)?;
        adam.m[k] = read(&manifest.tensors[n + 2 * k], &format!("adam.m.{}", p.name), &shape)?;
        adam.v[k] = read(&manifest.tensors[n + 2 * k + 1], &format!("adam.v.{}", p.name), &shape)?;
    }
    let vpath = dir.join(VOCAB_FILE);
    let vocab = if vpath.exists() { Some(Vocab::load(&vpath)?) } else { None };
    if let Some(v) = &vocab {
        if v.len() != manifest.model.vocab_size {
            return Err(Error::Checkpoint(format!(
                "vocab.txt has {} tokens, model expects {}",
                v.len(),
                manifest.model.vocab_size
            )));
        }
    }
    Ok(Checkpoint { model, train: manifest.train, step: manifest.step, adam, vocab })
}

/// Variant-aware desk model config for a vocabulary.
pub fn desk_model(variant: Variant, scope: MlmScope, vocab_size: usize) -> ModelConfig {
    let mut c = ModelConfig::desk(variant, vocab_size);
    c.mlm_scope = scope;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(steps: u64, warmup: u64) -> TrainConfig {
        TrainConfig { steps, warmup_steps: warmup, ..TrainConfig::desk() }
    }

    #[test]
    fn schedule_endpoints() {
        let c = cfg(100, 10);
        assert_eq!(lr_at(0, &c), 0.0);
        assert_eq!(lr_at(10, &c), c.peak_lr);
        assert!(lr_at(100, &c).abs() < 1e-9);
        let below = lr_at(9, &c) + c.peak_lr / 10.0;
        assert!((below - c.peak_lr).abs() < 1e-12);
        assert!((lr_at(11, &c) - c.peak_lr).abs() < 1e-3 * c.peak_lr);
    }

    #[test]
    fn invalid_train_configs() {
        assert!(cfg(10, 20).validate().is_err());
        let mut c = cfg(10, 1);
        c.mask.rate = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn full_rate_mask_only() {
        let ids = [2, 7, 8, 9, 3];
        let special = [true, false, false, false, true];
        let pol = MaskPolicy { rate: 1.0, mask_frac: 1.0, random_frac: 0.0 };
        let out = mask_tokens(&ids, &special, 4, &[7, 8, 9], &mut stream(0, Purpose::Mask, 0), &pol).unwrap();
        assert_eq!(out.ids, vec![2, 4, 4, 4, 3]);
        assert_eq!(out.labels, vec![None, Some(7), Some(8), Some(9), None]);
        assert!(mask_tokens(&[2, 3], &[true, true], 4, &[], &mut stream(0, Purpose::Mask, 0), &pol).is_err());
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Flat run configuration: one TOML table, every key optional.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dstg_core::corpus::BoundarySet;
use dstg_core::model::{MlmScope, ModelConfig, Stream, Variant};
use dstg_core::probes::{LayerIndexing, ProbeOptions};
use dstg_core::training::{MaskPolicy, TrainConfig};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "DSTG_OUT";
pub const DEFAULT_OUT_ROOT: &str = "runs";
pub const RESOLVED_FILE: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: String,
    pub vocab: String,
    pub doc_len: usize,
    pub vocab_max: usize,
    pub out_dir: String,
    pub seed: u64,
    pub threads: usize,

    pub variant: Variant,
    pub mlm_scope: MlmScope,
    pub layers: usize,
    pub heads: usize,
    pub d_ap: usize,
    pub d_sem: usize,
    pub max_positions: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub init_std: f64,

    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub mask_rate: f64,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub shift_positions: bool,
    pub ap_check_interval: u64,

    pub probe_seeds: u64,
    pub probe_lambda: f64,
    pub probe_layers: String,
    pub probe_docs: usize,
    pub segment_boundaries: String,

    pub heads_docs: usize,
    pub include_special_rows: bool,
    pub attn_layer: usize,
    pub attn_doc: usize,
    pub pca_layer: usize,
    pub pca_stream: String,
    pub pca_doc: usize,
    pub compare_lambda: f64,
    pub compare_test_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::desk(Variant::Dstg, 0);
        let t = TrainConfig::desk();
        Self {
            corpus: String::new(),
            vocab: String::new(),
            doc_len: dstg_core::corpus::DESK_DOC_LEN,
            vocab_max: dstg_core::corpus::DESK_VOCAB_MAX,
            out_dir: String::new(),
            seed: t.seed,
            threads: 0,
            variant: m.variant,
            mlm_scope: m.mlm_scope,
            layers: m.layers,
            heads: m.heads,
            d_ap: m.d_ap,
            d_sem: m.d_sem,
            max_positions: m.max_positions,
            num_buckets: m.num_buckets,
            max_distance: m.max_distance,
            rope_base: m.rope_base,
            norm_eps: m.norm_eps,
            init_std: m.init_std,
            steps: t.steps,
            batch_size: t.batch_size,
            peak_lr: t.peak_lr,
            warmup_steps: t.warmup_steps,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            mask_rate: t.mask.rate,
            mask_frac: t.mask.mask_frac,
            random_frac: t.mask.random_frac,
            shift_positions: t.shift_positions,
            ap_check_interval: t.ap_check_interval,
            probe_seeds: 5,
            probe_lambda: 1.0,
            probe_layers: "embeddings".into(),
            probe_docs: 0,
            segment_boundaries: ".!?\n".into(),
            heads_docs: 20,
            include_special_rows: true,
            attn_layer: 0,
            attn_doc: 0,
            pca_layer: 1,
            pca_stream: "ap".into(),
            pca_doc: 0,
            compare_lambda: 1.0,
            compare_test_frac: 0.2,
        }
    }
}

/// Every key with a one-line description, in schema order.
pub const KEYS: &[(&str, &str)] = &[
    ("corpus", "directory of .txt files; empty uses the bundled corpus"),
    ("vocab", "vocabulary file; empty builds one from the corpus (or uses the checkpoint's)"),
    ("doc_len", "tokens per document including [CLS] and [SEP]"),
    ("vocab_max", "largest generated vocabulary"),
    ("out_dir", "run directory; empty derives one under $DSTG_OUT (default ./runs)"),
    ("seed", "seed for initialisation, batching and masking"),
    ("threads", "worker threads; 0 uses every core"),
    ("variant", "dstg, ap, rp or rope"),
    ("mlm_scope", "semantic_only or full"),
    ("layers", "encoder blocks"),
    ("heads", "attention heads"),
    ("d_ap", "AP stream width (dstg only)"),
    ("d_sem", "semantic stream width"),
    ("max_positions", "absolute-position table size"),
    ("num_buckets", "relative-position buckets"),
    ("max_distance", "offset at which buckets saturate"),
    ("rope_base", "rotary frequency base"),
    ("norm_eps", "RMSNorm epsilon"),
    ("init_std", "std of the normal weight init"),
    ("steps", "optimizer updates"),
    ("batch_size", "documents per update"),
    ("peak_lr", "learning rate after warmup"),
    ("warmup_steps", "linear warmup length"),
    ("weight_decay", "decoupled decay on matrices"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("adam_eps", "Adam epsilon"),
    ("mask_rate", "share of tokens selected for prediction"),
    ("mask_frac", "selected tokens replaced by [MASK]"),
    ("random_frac", "selected tokens replaced by a random token"),
    ("shift_positions", "random global shift of absolute positions"),
    ("ap_check_interval", "steps between AP zero-gradient checks; 0 disables"),
    ("probe_seeds", "document splits per probe"),
    ("probe_lambda", "ridge penalty"),
    ("probe_layers", "embeddings (layer 0 = embeddings) or blocks"),
    ("probe_docs", "documents used by probes and comparisons; 0 uses all"),
    ("segment_boundaries", "characters that end a segment"),
    ("heads_docs", "documents averaged by the head taxonomy"),
    ("include_special_rows", "average [CLS]/[SEP] query rows in the taxonomy"),
    ("attn_layer", "layer of the attention maps"),
    ("attn_doc", "document of the attention maps"),
    ("pca_layer", "hidden-state layer for PCA (0 = embeddings)"),
    ("pca_stream", "ap, sem or all"),
    ("pca_doc", "document for hidden-state PCA"),
    ("compare_lambda", "ridge penalty of the inter-model regression"),
    ("compare_test_frac", "held-out token share of the inter-model regression"),
];

impl RunConfig {
    /// Parses a config file's text. Errors carry the line and column.
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Applies one `key=value` override. Values are read as TOML and fall
    /// back to a plain string.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let Some((key, value)) = assignment.split_once('=') else {
            bail!("override {assignment:?} is not key=value");
        };
        let (key, value) = (key.trim(), value.trim());
        let mut table = toml::Table::try_from(&*self)?;
        if !table.contains_key(key) {
            bail!("unknown config key {key:?}");
        }
        let parsed = match format!("v = {value}").parse::<toml::Table>() {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        table.insert(key.to_string(), parsed);
        *self = table.try_into().with_context(|| format!("in override {assignment:?}"))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(1)?.validate()?;
        self.train_config().validate()?;
        self.layer_indexing()?;
        self.pca_stream()?;
        if self.probe_seeds == 0 {
            bail!("probe_seeds must be at least 1");
        }
        Ok(())
    }

    pub fn corpus_dir(&self) -> PathBuf {
        if self.corpus.is_empty() {
            dstg_core::corpus::bundled_corpus_dir()
        } else {
            PathBuf::from(&self.corpus)
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let c = ModelConfig {
            variant: self.variant,
            mlm_scope: self.mlm_scope,
            layers: self.layers,
            heads: self.heads,
            d_ap: if self.variant == Variant::Dstg { self.d_ap } else { 0 },
            d_sem: self.d_sem,
            max_positions: self.max_positions,
            vocab_size,
            num_buckets: self.num_buckets,
            max_distance: self.max_distance,
            rope_base: self.rope_base,
            norm_eps: self.norm_eps,
            init_std: self.init_std,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            peak_lr: self.peak_lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            mask: MaskPolicy { rate: self.mask_rate, mask_frac: self.mask_frac, random_frac: self.random_frac },
            shift_positions: self.shift_positions,
            ap_check_interval: self.ap_check_interval,
            seed: self.seed,
        }
    }

    fn layer_indexing(&self) -> Result<LayerIndexing> {
        match self.probe_layers.as_str() {
            "embeddings" => Ok(LayerIndexing::Embeddings),
            "blocks" => Ok(LayerIndexing::Blocks),
            other => bail!("probe_layers must be embeddings or blocks, got {other:?}"),
        }
    }

    pub fn pca_stream(&self) -> Result<Stream> {
        Ok(self.pca_stream.parse()?)
    }

    pub fn boundaries(&self) -> BoundarySet {
        BoundarySet::from_chars(&self.segment_boundaries)
    }

    pub fn probe_options(&self) -> Result<ProbeOptions> {
        Ok(ProbeOptions {
            seeds: (0..self.probe_seeds).map(|k| self.seed + k).collect(),
            lambda: self.probe_lambda,
            layers: self.layer_indexing()?,
            boundaries: self.boundaries(),
        })
    }
}

/// Key names of the serialized schema, sorted.
///
/// ```
/// use dstg_cli::config::{schema_keys, KEYS};
/// let mut documented: Vec<String> = KEYS.iter().map(|(k, _)| k.to_string()).collect();
/// documented.sort();
/// assert_eq!(documented, schema_keys());
/// ```
pub fn schema_keys() -> Vec<String> {
    let table = toml::Table::try_from(RunConfig::default()).expect("config serializes");
    let mut keys: Vec<String> = table.keys().cloned().collect();
    keys.sort();
    keys
}

/// The key table printed under every subcommand's help.
pub fn keys_help() -> String {
    let defaults = toml::Table::try_from(RunConfig::default()).expect("config serializes");
    let mut out = String::from("Config keys (set in --config FILE or with --set key=value):\n");
    for (k, doc) in KEYS {
        let v = defaults.get(*k).map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("  {k:<22} {v:<16} {doc}\n"));
    }
    out
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line front end: training, probing and the analysis suite, each
//! writing into one run directory.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use dstg_core::analysis::{
    attention_maps, embedding_spectrum, head_influence_all, hidden_pca, inter_model_regression, position_table,
    read_matrix_csv, stacked_states, to_dmatrix, write_attention_maps, write_heads_csv, write_hidden_pca_csv,
    write_spectrum_csv, DocInput, InfluenceOptions,
};
use dstg_core::corpus::{build_documents, read_texts, Document, Vocab};
use dstg_core::model::{Model, Stream, Variant};
use dstg_core::probes::{compare_scopes, probe_model, write_probe_csv, write_probe_table, write_scope_csv, Target};
use dstg_core::training::{load_checkpoint, save_checkpoint, write_loss_csv, Checkpoint, Trainer};

use config::{keys_help, RunConfig, DEFAULT_OUT_ROOT, OUT_ENV, RESOLVED_FILE};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_FILE: &str = "loss.csv";

#[derive(Parser, Debug)]
#[command(name = "dstg", version, about = "Train and analyse disentangled positional encoders")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub set: Vec<String>,
    /// Shorthand for --set variant=...
    #[arg(long, global = true)]
    pub variant: Option<Variant>,
    /// Cap on worker threads (0 = all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one model and write a checkpoint and loss trace.
    Train {
        /// Continue from this checkpoint instead of a fresh init.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this update; the checkpoint can be resumed.
        #[arg(long)]
        stop_at: Option<u64>,
    },
    /// Structural probes for one or more checkpoints.
    Probe {
        #[arg(required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Head taxonomy by component ablation (DSTG only).
    Heads { checkpoint: PathBuf },
    /// PCA and DCT of an absolute-position table.
    Spectrum {
        checkpoint: Option<PathBuf>,
        /// Embedding matrix as CSV (positions x dims) instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        matrix: Option<PathBuf>,
    },
    /// Per-component attention maps of one layer (DSTG only).
    Attn { checkpoint: PathBuf },
    /// Two-component PCA of one document's hidden states.
    HiddenPca { checkpoint: PathBuf },
    /// Semantic-only vs full-scope probes and inter-model regression.
    Compare { semantic_only: PathBuf, full: PathBuf },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train { .. } => "train",
            Command::Probe { .. } => "probe",
            Command::Heads { .. } => "heads",
            Command::Spectrum { .. } => "spectrum",
            Command::Attn { .. } => "attn",
            Command::HiddenPca { .. } => "hidden-pca",
            Command::Compare { .. } => "compare",
        }
    }
}

/// The clap command with the config key table appended to every help page.
pub fn command() -> clap::Command {
    let keys = keys_help();
    Cli::command().after_help(keys.clone()).mut_subcommands(|s| s.after_help(keys.clone()))
}

pub fn parse<I, T>(args: I) -> Result<Cli, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = command().try_get_matches_from(args)?;
    Cli::from_arg_matches(&matches)
}

/// Config file, then `--set` overrides, then the dedicated flags.
pub fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        cfg.set(s)?;
    }
    if let Some(v) = common.variant {
        cfg.variant = v;
    }
    if let Some(t) = common.threads {
        cfg.threads = t;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir(cfg: &RunConfig, cmd: &Command) -> PathBuf {
    if !cfg.out_dir.is_empty() {
        return PathBuf::from(&cfg.out_dir);
    }
    let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_ROOT));
    let label = match cmd {
        Command::Train { .. } => format!("{}-{}-seed{}", cfg.variant, cfg.mlm_scope.name(), cfg.seed),
        Command::Probe { checkpoints } => checkpoints.iter().map(|c| dir_label(c)).collect::<Vec<_>>().join("+"),
        Command::Heads { checkpoint } | Command::Attn { checkpoint } | Command::HiddenPca { checkpoint } => {
            dir_label(checkpoint)
        }
        Command::Spectrum { checkpoint, matrix } => {
            checkpoint.as_ref().or(matrix.as_ref()).map_or_else(|| "spectrum".into(), |p| dir_label(p))
        }
        Command::Compare { semantic_only, full } => format!("{}+{}", dir_label(semantic_only), dir_label(full)),
    };
    root.join(format!("{}-{label}", cmd.name()))
}

fn dir_label(p: &Path) -> String {
    let p = if p.file_name().is_some_and(|n| n == CHECKPOINT_DIR) { p.parent().unwrap_or(p) } else { p };
    p.file_stem().map_or_else(|| "input".into(), |s| s.to_string_lossy().into_owned())
}

/// Runs a parsed command line; returns the run directory.
pub fn run(cli: Cli) -> Result<PathBuf> {
    let cfg = resolve_config(&cli.common)?;
    if cfg.threads > 0 {
        // A second call in the same process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    let dir = run_dir(&cfg, &cli.command);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(RESOLVED_FILE), cfg.to_toml())?;
    match &cli.command {
        Command::Train { resume, stop_at } => cmd_train(&cfg, &dir, resume.as_deref(), *stop_at),
        Command::Probe { checkpoints } => cmd_probe(&cfg, &dir, checkpoints),
        Command::Heads { checkpoint } => cmd_heads(&cfg, &dir, checkpoint),
        Command::Spectrum { checkpoint, matrix } => cmd_spectrum(&dir, checkpoint.as_deref(), matrix.as_deref()),
        Command::Attn { checkpoint } => cmd_attn(&cfg, &dir, checkpoint),
        Command::HiddenPca { checkpoint } => cmd_hidden_pca(&cfg, &dir, checkpoint),
        Command::Compare { semantic_only, full } => cmd_compare(&cfg, &dir, semantic_only, full),
    }?;
    Ok(dir)
}

pub fn main_with<I, T>(args: I) -> Result<PathBuf>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match parse(args) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    run(cli)
}

fn load_vocab(cfg: &RunConfig, texts: &[String]) -> Result<Vocab> {
    if cfg.vocab.is_empty() {
        let refs: Vec<&str> = texts.iter().map(|s| s.as_str()).collect();
        Ok(Vocab::build(&refs, cfg.vocab_max)?)
    } else {
        Ok(Vocab::load(Path::new(&cfg.vocab))?)
    }
}

fn corpus_texts(cfg: &RunConfig) -> Result<Vec<String>> {
    let dir = cfg.corpus_dir();
    read_texts(&dir).with_context(|| format!("reading corpus {}", dir.display()))
}

fn cmd_train(cfg: &RunConfig, dir: &Path, resume: Option<&Path>, stop_at: Option<u64>) -> Result<()> {
    let texts = corpus_texts(cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = load_checkpoint(p).with_context(|| format!("loading {}", p.display()))?;
            let vocab = match &ckpt.vocab {
                Some(v) => v.clone(),
                None => load_vocab(cfg, &texts)?,
            };
            let docs = build_documents(&texts, &vocab, cfg.doc_len, true)?;
            Trainer::from_checkpoint(ckpt, &vocab, docs)?
        }
        None => {
            let vocab = load_vocab(cfg, &texts)?;
            let docs = build_documents(&texts, &vocab, cfg.doc_len, true)?;
            Trainer::new(cfg.model_config(vocab.len())?, cfg.train_config(), &vocab, docs)?
        }
    };
    match stop_at {
        Some(s) => trainer.run_until(s.min(trainer.config().steps))?,
        None => trainer.run()?,
    }
    save_checkpoint(&dir.join(CHECKPOINT_DIR), &trainer.checkpoint())?;
    write_loss_csv(&dir.join(LOSS_FILE), trainer.trace())?;
    if let Some(last) = trainer.trace().last() {
        println!("{}: step {} loss {:.4}", trainer.model().config.label(), last.step, last.loss);
    }
    Ok(())
}

struct Loaded {
    label: String,
    ckpt: Checkpoint,
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<Loaded>> {
    let mut out: Vec<Loaded> = Vec::new();
    for p in paths {
        let ckpt = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
        let base = ckpt.model.config.label();
        let mut label = base.clone();
        let mut k = 2;
        while out.iter().any(|l| l.label == label) {
            label = format!("{base}_{k}");
            k += 1;
        }
        out.push(Loaded { label, ckpt });
    }
    Ok(out)
}

/// Shared tokenizer of the checkpoints (or the configured one) and the documents it yields.
fn analysis_corpus(cfg: &RunConfig, models: &[&Checkpoint]) -> Result<(Vocab, Vec<Document>)> {
    let texts = corpus_texts(cfg)?;
    let configured = if cfg.vocab.is_empty() { None } else { Some(Vocab::load(Path::new(&cfg.vocab))?) };
    let mut vocab = configured.clone();
    for c in models {
        if let Some(v) = &c.vocab {
            match &vocab {
                Some(known) if known.tokens() != v.tokens() => {
                    bail!("tokenizer mismatch: checkpoints (or the configured vocab) use different vocabularies")
                }
                None => vocab = Some(v.clone()),
                _ => {}
            }
        }
    }
    let vocab = match vocab {
        Some(v) => v,
        None => load_vocab(cfg, &texts)?,
    };
    let mut docs = build_documents(&texts, &vocab, cfg.doc_len, true)?;
    if cfg.probe_docs > 0 {
        docs.truncate(cfg.probe_docs);
    }
    Ok((vocab, docs))
}

fn cmd_probe(cfg: &RunConfig, dir: &Path, paths: &[PathBuf]) -> Result<()> {
    let models = load_models(paths)?;
    let refs: Vec<&Checkpoint> = models.iter().map(|m| &m.ckpt).collect();
    let (vocab, docs) = analysis_corpus(cfg, &refs)?;
    let opts = cfg.probe_options()?;
    let mut all = Vec::new();
    for m in &models {
        for r in probe_model(&m.label, &m.ckpt.model, &docs, &vocab, &opts)? {
            write_probe_csv(dir, &r)?;
            all.push(r);
        }
    }
    if models.len() > 1 {
        for t in Target::ALL {
            let rows: Vec<_> = all.iter().filter(|r| r.target == t).collect();
            write_probe_table(&dir.join(format!("probe_table_{}.csv", t.name())), &rows)?;
        }
    }
    Ok(())
}

fn single(cfg: &RunConfig, path: &Path) -> Result<(Model<f32>, Vocab, Vec<Document>)> {
    let ckpt = load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let (vocab, docs) = analysis_corpus(cfg, &[&ckpt])?;
    Ok((ckpt.model, vocab, docs))
}

fn pick(docs: &[Document], i: usize) -> Result<&Document> {
    docs.get(i).with_context(|| format!("document {i} of {}", docs.len()))
}

fn cmd_heads(cfg: &RunConfig, dir: &Path, path: &Path) -> Result<()> {
    let (model, vocab, docs) = single(cfg, path)?;
    let inputs: Vec<DocInput> = docs.iter().take(cfg.heads_docs.max(1)).map(|d| DocInput::new(d, &vocab)).collect();
    let opts = InfluenceOptions { include_special_rows: cfg.include_special_rows };
    write_heads_csv(&dir.join("heads.csv"), &head_influence_all(&model, &inputs, opts)?)?;
    Ok(())
}

fn cmd_spectrum(dir: &Path, checkpoint: Option<&Path>, matrix: Option<&Path>) -> Result<()> {
    let e = match (checkpoint, matrix) {
        (_, Some(m)) => read_matrix_csv(m)?,
        (Some(c), None) => {
            let ckpt = load_checkpoint(c).with_context(|| format!("loading checkpoint {}", c.display()))?;
            to_dmatrix(position_table(&ckpt.model)?)?
        }
        (None, None) => bail!("spectrum needs a checkpoint or --matrix FILE"),
    };
    write_spectrum_csv(&dir.join("spectrum.csv"), &embedding_spectrum(&e))?;
    Ok(())
}

fn cmd_attn(cfg: &RunConfig, dir: &Path, path: &Path) -> Result<()> {
    let (model, vocab, docs) = single(cfg, path)?;
    let input = DocInput::new(pick(&docs, cfg.attn_doc)?, &vocab);
    let maps = attention_maps(&model, &input.input(), cfg.attn_layer)?;
    write_attention_maps(dir, cfg.attn_layer, &maps)?;
    Ok(())
}

fn cmd_hidden_pca(cfg: &RunConfig, dir: &Path, path: &Path) -> Result<()> {
    let (model, vocab, docs) = single(cfg, path)?;
    let doc = pick(&docs, cfg.pca_doc)?;
    let h = hidden_pca(&model, doc, &vocab, &cfg.boundaries(), cfg.pca_layer, cfg.pca_stream()?)?;
    write_hidden_pca_csv(&dir.join(format!("hidden_pca_L{}.csv", cfg.pca_layer)), &h)?;
    Ok(())
}

fn cmd_compare(cfg: &RunConfig, dir: &Path, semantic_only: &Path, full: &Path) -> Result<()> {
    let models = load_models(&[semantic_only.to_path_buf(), full.to_path_buf()])?;
    let (a, b) = (&models[0], &models[1]);
    if a.ckpt.model.config.layers != b.ckpt.model.config.layers {
        bail!("compared models have different depths");
    }
    let (vocab, docs) = analysis_corpus(cfg, &[&a.ckpt, &b.ckpt])?;
    let opts = cfg.probe_options()?;
    let ra = probe_model(&a.label, &a.ckpt.model, &docs, &vocab, &opts)?;
    let rb = probe_model(&b.label, &b.ckpt.model, &docs, &vocab, &opts)?;
    for (x, y) in ra.iter().zip(&rb) {
        write_scope_csv(&dir.join(format!("scope_{}.csv", x.target.name())), &compare_scopes(x, y)?)?;
    }
    let mut out = String::from("layer,r2\n");
    for l in 0..=a.ckpt.model.config.layers {
        let src = stacked_states(&a.ckpt.model, &docs, &vocab, l, Stream::All)?;
        let dst = stacked_states(&b.ckpt.model, &docs, &vocab, l, Stream::All)?;
        let r2 = inter_model_regression(&src, &dst, cfg.compare_lambda, cfg.compare_test_frac, cfg.seed)?;
        out.push_str(&format!("{l},{r2}\n"));
    }
    fs::write(dir.join("inter_model.csv"), out)?;
    Ok(())
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use dstg_cli::config::{keys_help, RunConfig, KEYS, RESOLVED_FILE};
use dstg_cli::{parse, run, CHECKPOINT_DIR, LOSS_FILE};

fn exec(args: &[&str]) -> anyhow::Result<PathBuf> {
    let mut full = vec!["dstg"];
    full.extend_from_slice(args);
    run(parse(full).map_err(|e| anyhow::anyhow!(e.to_string()))?)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const QUICK: &[&str] = &["--set", "steps=3", "--set", "batch_size=4", "--set", "warmup_steps=1", "--threads", "1"];
const SMALL_PROBE: &[&str] = &["--set", "probe_docs=30", "--set", "probe_seeds=2", "--set", "heads_docs=3"];

fn train_quick(out: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["train", "--out", s(out)];
    args.extend_from_slice(QUICK);
    args.extend_from_slice(extra);
    exec(&args).unwrap().join(CHECKPOINT_DIR)
}

#[test]
fn minimal_config_trains_fifty_steps() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "steps = 50\nwarmup_steps = 5\n").unwrap();
    let dir = exec(&["train", "--config", s(&cfg), "--out", s(&tmp.path().join("r"))]).unwrap();
    let trace = dstg_core::training::read_loss_csv(&dir.join(LOSS_FILE)).unwrap();
    assert_eq!(trace.len(), 50);
    assert!(dir.join(CHECKPOINT_DIR).join("manifest.json").exists());
    let resolved = RunConfig::from_toml(&fs::read_to_string(dir.join(RESOLVED_FILE)).unwrap()).unwrap();
    assert_eq!(resolved.steps, 50);
}

#[test]
fn missing_corpus_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let err = exec(&["train", "--out", s(tmp.path()), "--set", "corpus=/nonexistent/corpus"]).unwrap_err();
    assert!(format!("{err:#}").contains("corpus"), "{err:#}");
}

#[test]
fn variant_flag_is_recorded_in_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = train_quick(tmp.path(), &["--variant", "rope"]);
    let manifest = fs::read_to_string(ck.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"variant\": \"rope\""));
    assert_eq!(dstg_core::training::load_checkpoint(&ck).unwrap().model.config.d_ap, 0);
}

#[test]
fn config_errors() {
    let err = RunConfig::from_toml("steps = 10\nbogus_key = 1\n").unwrap_err();
    assert!(err.to_string().contains("bogus_key"));
    let err = RunConfig::from_toml("steps = 10\npeak_lr = \"fast\"\n").unwrap_err();
    assert!(err.to_string().contains("line 2"), "{err}");
    let mut c = RunConfig::default();
    assert!(c.set("nope=1").is_err());
    c.set("variant=ap").unwrap();
    c.set("peak_lr = 1e-3").unwrap();
    assert_eq!(c.peak_lr, 1e-3);
    assert!(c.set("steps=many").is_err());
    let tmp = tempfile::tempdir().unwrap();
    assert!(exec(&["train", "--out", s(tmp.path()), "--set", "warmup_steps=900"]).is_err());
}

#[test]
fn help_lists_every_key_with_defaults() {
    let help = keys_help();
    for (k, _) in KEYS {
        assert!(help.contains(k), "{k}");
    }
    assert!(help.contains("peak_lr") && help.contains("0.003"));
    for sub in ["train", "probe", "heads", "spectrum", "attn", "hidden-pca", "compare"] {
        let err = parse(["dstg", sub, "--help"]).unwrap_err();
        assert!(err.to_string().contains("mask_rate"), "{sub}");
    }
}

#[test]
fn analysis_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let dstg = train_quick(&tmp.path().join("dstg"), &[]);
    let rope = train_quick(&tmp.path().join("rope"), &["--variant", "rope"]);
    let full = train_quick(&tmp.path().join("full"), &["--set", "mlm_scope=full"]);
    let out = |name: &str| tmp.path().join(name);

    let mut args = vec!["probe", s(&dstg), "--out"];
    let p1 = out("p1");
    args.push(s(&p1));
    args.extend_from_slice(SMALL_PROBE);
    exec(&args).unwrap();
    let csvs: Vec<_> = fs::read_dir(&p1).unwrap().filter_map(|e| e.ok()).filter(|e| e.file_name().to_string_lossy().starts_with("probes_")).collect();
    assert_eq!(csvs.len(), 3);
    assert!(fs::read_to_string(p1.join("probes_dstg_token_ap.csv")).unwrap().contains(",NA,"));

    let p2 = out("p2");
    let mut args = vec!["probe", s(&dstg), s(&rope), s(&full), "--out", s(&p2)];
    args.extend_from_slice(SMALL_PROBE);
    exec(&args).unwrap();
    assert!(p2.join("probe_table_token_ap.csv").exists());

    let bad = out("bad");
    fs::create_dir_all(&bad).unwrap();
    fs::write(bad.join("manifest.json"), "{").unwrap();
    assert!(exec(&["probe", s(&bad), "--out", s(&out("p3"))]).is_err());

    let err = exec(&["heads", s(&rope), "--out", s(&out("h0"))]).unwrap_err();
    assert!(format!("{err:#}").contains("requires a DSTG model"));
    let mut args = vec!["heads", s(&dstg), "--out"];
    let h = out("h");
    args.push(s(&h));
    args.extend_from_slice(SMALL_PROBE);
    exec(&args).unwrap();
    let heads = fs::read_to_string(h.join("heads.csv")).unwrap();
    assert!(heads.starts_with("layer,head,score_sem,score_ap,score_rp,norm_sem,norm_ap,norm_rp\n"));
    assert_eq!(heads.lines().count(), 1 + 2 * 4);

    exec(&["spectrum", s(&dstg), "--out", s(&out("sp"))]).unwrap();
    assert!(out("sp").join("spectrum.csv").exists());
    assert!(exec(&["spectrum", s(&rope), "--out", s(&out("sp2"))]).is_err());

    exec(&["attn", s(&dstg), "--out", s(&out("at"))]).unwrap();
    for comp in ["sem", "ap", "rp", "combined"] {
        assert!(out("at").join(format!("attn_L0_H0_{comp}.svg")).exists());
        assert!(out("at").join(format!("attn_L0_H3_{comp}.csv")).exists());
    }

    exec(&["hidden-pca", s(&dstg), "--out", s(&out("pca"))]).unwrap();
    assert!(fs::read_to_string(out("pca").join("hidden_pca_L1.csv")).unwrap().starts_with("token_index,pc1,pc2,segment_id\n"));
    assert!(exec(&["hidden-pca", s(&dstg), "--set", "pca_layer=2", "--out", s(&out("pca2"))]).is_err());

    let mut args = vec!["compare", s(&dstg), s(&full), "--out"];
    let c = out("cmp");
    args.push(s(&c));
    args.extend_from_slice(SMALL_PROBE);
    exec(&args).unwrap();
    let scope = fs::read_to_string(c.join("scope_token_ap.csv")).unwrap();
    assert!(scope.starts_with("layer,stream,r2_semantic_only,r2_full\n"));
    assert_eq!(fs::read_to_string(c.join("inter_model.csv")).unwrap().lines().count(), 4);
}

#[test]
fn spectrum_of_imported_matrix_needs_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("emb.csv");
    let mut text = String::new();
    for p in 0..64 {
        let t = 2.0 * std::f64::consts::PI * p as f64 / 64.0;
        text.push_str(&format!("{},{},{}\n", t.sin(), t.cos(), 0.5 * t.sin()));
    }
    fs::write(&csv, text).unwrap();
    let dir = exec(&["spectrum", "--matrix", s(&csv), "--out", s(&tmp.path().join("o"))]).unwrap();
    let out = fs::read_to_string(dir.join("spectrum.csv")).unwrap();
    assert!(out.starts_with("pc,variance_ratio,lowfreq_share\n"));
}

#[test]
fn commands_are_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let a = train_quick(&tmp.path().join("a"), &[]);
    let b = train_quick(&tmp.path().join("b"), &[]);
    for f in ["manifest.json", "tensors.bin", "vocab.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let la = fs::read(a.parent().unwrap().join(LOSS_FILE)).unwrap();
    assert_eq!(la, fs::read(b.parent().unwrap().join(LOSS_FILE)).unwrap());
}

#[test]
fn resume_continues_training() {
    let tmp = tempfile::tempdir().unwrap();
    let whole = train_quick(&tmp.path().join("w"), &["--set", "steps=6"]);
    let first = train_quick(&tmp.path().join("a"), &["--set", "steps=6", "--stop-at", "3"]);
    assert_eq!(dstg_core::training::load_checkpoint(&first).unwrap().step, 3);
    let dir = exec(&["train", "--resume", s(&first), "--out", s(&tmp.path().join("b")), "--threads", "1"]).unwrap();
    let resumed = dstg_core::training::load_checkpoint(&dir.join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(resumed.step, 6);
    assert_eq!(resumed, dstg_core::training::load_checkpoint(&whole).unwrap());
    let read = |p: &Path| dstg_core::training::read_loss_csv(&p.join(LOSS_FILE)).unwrap();
    let mut joined = read(first.parent().unwrap());
    joined.extend(read(&dir));
    assert_eq!(joined, read(whole.parent().unwrap()));
}

#[test]
fn default_run_dir_uses_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    std::env::set_var(dstg_cli::config::OUT_ENV, tmp.path());
    let mut args = vec!["train"];
    args.extend_from_slice(QUICK);
    let dir = exec(&args).unwrap();
    std::env::remove_var(dstg_cli::config::OUT_ENV);
    assert_eq!(dir, tmp.path().join("train-dstg-semantic_only-seed0"));
    assert!(dir.join(RESOLVED_FILE).exists());
}

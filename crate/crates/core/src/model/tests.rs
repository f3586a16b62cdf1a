// SPDX-License-Identifier: MIT OR Apache-2.0

use super::*;
use crate::numerics::rmsnorm;

fn small(variant: Variant) -> ModelConfig {
    let mut c = ModelConfig::desk(variant, 11);
    c.d_sem = 8;
    c.d_ap = if variant == Variant::Dstg { 4 } else { 0 };
    c.heads = 2;
    c.max_positions = 16;
    c.init_std = 0.3;
    c
}

fn doc(n: usize) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let ids = (0..n).map(|i| (3 * i + 1) % 11).collect();
    let pos = (0..n).collect();
    let special = (0..n).map(|i| i == 0 || i == n - 1).collect();
    (ids, pos, special)
}

fn input<'a>(d: &'a (Vec<usize>, Vec<usize>, Vec<bool>)) -> EncoderInput<'a> {
    EncoderInput { ids: &d.0, positions: &d.1, special: &d.2 }
}

fn randomize_biases(m: &mut Model<f64>) {
    for l in 0..m.config.layers {
        if let Ok(t) = m.params.get_mut(&lname(l, "rp_bias")) {
            for (k, v) in t.data_mut().iter_mut().enumerate() {
                *v = ((k * 7919) % 13) as f64 / 13.0 - 0.5;
            }
        }
    }
}

#[test]
fn parameter_count_matches_store() {
    for v in Variant::ALL {
        for scope in [MlmScope::SemanticOnly, MlmScope::Full] {
            let mut c = ModelConfig::desk(v, 300);
            c.mlm_scope = scope;
            let m = Model::init(c.clone(), 0).unwrap();
            assert_eq!(m.params.numel(), c.parameter_count(), "{v} {scope:?}");
        }
    }
}

#[test]
fn config_invariants() {
    let mut c = small(Variant::Dstg);
    c.d_ap = 3;
    assert!(c.validate().is_err());
    let mut c = small(Variant::Rope);
    c.d_ap = 4;
    assert!(c.validate().is_err());
}

#[test]
fn attention_rows_are_stochastic() {
    let d = doc(7);
    for v in Variant::ALL {
        let m = Model::init(small(v), 3).unwrap().cast::<f64>();
        let ins = m.inspect(&input(&d)).unwrap();
        for layer in &ins.heads {
            for h in layer {
                for i in 0..7 {
                    let s: f64 = h.probs.row(i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn logits_match_per_pair_recomputation() {
    let d = doc(6);
    let mut m = Model::init(small(Variant::Dstg), 5).unwrap().cast::<f64>();
    randomize_biases(&mut m);
    let ins = m.inspect(&input(&d)).unwrap();
    let c = &m.config;
    let dh = c.d_head();
    let x = &ins.states[0];
    let p = |n: &str| m.params.get(n).unwrap();
    let ns: Vec<Vec<f64>> =
        (0..6).map(|i| rmsnorm(x.sem.row(i), p("layers.0.attn_norm_sem").data(), c.norm_eps).unwrap()).collect();
    let na: Vec<Vec<f64>> = (0..6)
        .map(|i| rmsnorm(x.ap.as_ref().unwrap().row(i), p("layers.0.attn_norm_ap").data(), c.norm_eps).unwrap())
        .collect();
    let proj = |v: &[f64], w: &Tensor<f64>, col: usize| -> f64 { (0..v.len()).map(|r| v[r] * w.get2(r, col)).sum() };
    for h in 0..c.heads {
        for i in 0..6 {
            for j in 0..6 {
                let mut sem = 0.0;
                let mut ap = 0.0;
                for k in 0..dh {
                    let col = h * dh + k;
                    sem += proj(&ns[i], p("layers.0.wq_sem"), col) * proj(&ns[j], p("layers.0.wk_sem"), col);
                    ap += proj(&na[i], p("layers.0.wq_ap"), col) * proj(&na[j], p("layers.0.wk_ap"), col);
                }
                let scale = (dh as f64).sqrt();
                let mut want = sem / scale;
                if !d.2[i] && !d.2[j] {
                    want += ap / scale;
                }
                let col = crate::positional::bias_column(i, j, &d.2, c.num_buckets, c.max_distance);
                want += p("layers.0.rp_bias").get2(h, col);
                assert!((ins.heads[0][h].logits.get2(i, j) - want).abs() < 1e-5);
            }
        }
    }
}

#[test]
fn zero_ap_query_key_leaves_bias_plus_semantic() {
    let d = doc(6);
    let mut m = Model::init(small(Variant::Dstg), 8).unwrap().cast::<f64>();
    randomize_biases(&mut m);
    for l in 0..m.config.layers {
        for w in ["wq_ap", "wk_ap"] {
            m.params.get_mut(&lname(l, w)).unwrap().data_mut().fill(0.0);
        }
    }
    let ins = m.inspect(&input(&d)).unwrap();
    for layer in &ins.heads {
        for h in layer {
            let b = h.bias.as_ref().unwrap();
            for k in 0..h.logits.numel() {
                assert_eq!(h.logits.data()[k], h.w_sem.data()[k] + 0.0 + b.data()[k]);
            }
        }
    }
}

#[test]
fn special_rows_ignore_ap_perturbation() {
    let d = doc(6);
    let m = Model::init(small(Variant::Dstg), 9).unwrap();
    let a = m.inspect(&input(&d)).unwrap();
    let mut m2 = m.clone();
    for v in m2.params.get_mut("ap_emb").unwrap().data_mut() {
        *v += 0.5;
    }
    let b = m2.inspect(&input(&d)).unwrap();
    let (x, y) = (&a.heads[0][0].logits, &b.heads[0][0].logits);
    for k in 0..6 {
        assert_eq!(x.row(0)[k], y.row(0)[k]);
        assert_eq!(x.get2(k, 5), y.get2(k, 5));
    }
    assert!(x.max_abs_diff(y) > 0.0);
}

/// Attention output with all probabilities one-hot on the diagonal.
#[test]
fn identity_attention_does_not_mix_tokens() {
    let d = doc(3);
    let mut c = small(Variant::Dstg);
    c.layers = 1;
    let m = Model::init(c.clone(), 2).unwrap().cast::<f64>();
    let fixed = vec![vec![Tensor::<f64>::eye(3); c.heads]];
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let trace = m.forward(&mut g, &bound, &input(&d), ForwardOptions { inject_probs: Some(&fixed) }).unwrap();
    let x0 = trace.embeddings;
    let mid = trace.layers[0].mid;
    let p = |n: &str| m.params.get(n).unwrap().clone();
    for (stream, x, out, norm, wv, wo) in [
        ("sem", x0.sem, mid.sem, "attn_norm_sem", "wv_sem", "wo_sem"),
        ("ap", x0.ap.unwrap(), mid.ap.unwrap(), "attn_norm_ap", "wv_ap", "wo_ap"),
    ] {
        let xs = g.value(x);
        let mut normed = Vec::new();
        for i in 0..3 {
            normed.extend(rmsnorm(xs.row(i), p(&lname(0, norm)).data(), c.norm_eps).unwrap());
        }
        let normed = Tensor::new(xs.shape().to_vec(), normed).unwrap();
        let v = crate::numerics::matmul(&normed, &p(&lname(0, wv))).unwrap();
        let o = crate::numerics::matmul(&v, &p(&lname(0, wo))).unwrap();
        let got = g.value(out);
        for k in 0..got.numel() {
            assert!((got.data()[k] - xs.data()[k] - o.data()[k]).abs() < 1e-12, "{stream}");
        }
    }
}

/// Hand-expanded weighted sum for a 3-token sequence with a fixed attention pattern.
#[test]
fn injected_attention_weighted_sums() {
    let d = doc(3);
    let mut c = small(Variant::Rp);
    c.layers = 1;
    let m = Model::init(c.clone(), 4).unwrap().cast::<f64>();
    let a = Tensor::from_rows(&[vec![0.2, 0.3, 0.5], vec![1.0, 0.0, 0.0], vec![0.1, 0.1, 0.8]]).unwrap();
    let fixed = vec![vec![a.clone(); c.heads]];
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let trace = m.forward(&mut g, &bound, &input(&d), ForwardOptions { inject_probs: Some(&fixed) }).unwrap();
    let xs = g.value(trace.embeddings.sem).clone();
    let p = |n: &str| m.params.get(n).unwrap().clone();
    let mut normed = Vec::new();
    for i in 0..3 {
        normed.extend(rmsnorm(xs.row(i), p("layers.0.attn_norm_sem").data(), c.norm_eps).unwrap());
    }
    let normed = Tensor::new(vec![3, 8], normed).unwrap();
    let v = crate::numerics::matmul(&normed, &p("layers.0.wv_sem")).unwrap();
    // Same A for every head, so the head split is irrelevant for the mixture.
    let mut mixed = vec![0.0; 24];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..8 {
                mixed[i * 8 + k] += a.get2(i, j) * v.get2(j, k);
            }
        }
    }
    let mixed = Tensor::new(vec![3, 8], mixed).unwrap();
    let o = crate::numerics::matmul(&mixed, &p("layers.0.wo_sem")).unwrap();
    let got = g.value(trace.layers[0].mid.sem);
    for k in 0..24 {
        assert!((got.data()[k] - xs.data()[k] - o.data()[k]).abs() < 1e-5);
    }
}

#[test]
fn zero_ffn_weights_are_identity() {
    let d = doc(5);
    let mut m = Model::init(small(Variant::Dstg), 1).unwrap();
    for l in 0..m.config.layers {
        for w in ["w_gate", "w_up", "w_down_ap", "w_down_sem"] {
            m.params.get_mut(&lname(l, w)).unwrap().data_mut().fill(0.0);
        }
    }
    let ins = m.inspect(&input(&d)).unwrap();
    for l in 0..m.config.layers {
        assert_eq!(ins.mid[l], ins.states[l + 1]);
    }
}

#[test]
fn intermediate_split_feeds_matching_stream() {
    // Perturb one column of the up projection: the last AP intermediate unit
    // must move only x_AP, the first semantic unit only x_sem.
    let d = doc(5);
    let mut c = small(Variant::Dstg);
    c.layers = 1;
    let m = Model::init(c.clone(), 6).unwrap().cast::<f64>();
    let base = m.inspect(&input(&d)).unwrap();
    for (col, ap_moves) in [(c.d_int_ap() - 1, true), (c.d_int_ap(), false)] {
        let mut pm = m.clone();
        let w = pm.params.get_mut("layers.0.w_up").unwrap();
        let cols = w.cols();
        for r in 0..w.rows() {
            w.data_mut()[r * cols + col] += 0.7;
        }
        let out = pm.inspect(&input(&d)).unwrap();
        let ap_diff = out.states[1].ap.as_ref().unwrap().max_abs_diff(base.states[1].ap.as_ref().unwrap());
        let sem_diff = out.states[1].sem.max_abs_diff(&base.states[1].sem);
        assert_eq!(ap_diff > 0.0, ap_moves);
        assert_eq!(sem_diff > 0.0, !ap_moves);
    }
}

#[test]
fn zero_layers_return_embeddings() {
    let d = doc(4);
    let mut c = small(Variant::Ap);
    c.layers = 0;
    let m = Model::init(c, 1).unwrap();
    let ins = m.inspect(&input(&d)).unwrap();
    assert_eq!(ins.states.len(), 1);
    let tok = m.params.get("tok_emb").unwrap();
    let pos = m.params.get("pos_emb").unwrap();
    for i in 0..4 {
        for k in 0..8 {
            assert_eq!(ins.states[0].sem.get2(i, k), tok.get2(d.0[i], k) + pos.get2(i, k));
        }
    }
}

#[test]
fn zeroed_ap_table_only_reaches_semantics_after_first_block() {
    let d = doc(6);
    let m = Model::init(small(Variant::Dstg), 12).unwrap();
    let mut z = m.clone();
    z.params.get_mut("ap_emb").unwrap().data_mut().fill(0.0);
    let a = m.inspect(&input(&d)).unwrap();
    let b = z.inspect(&input(&d)).unwrap();
    assert_eq!(a.states[0].sem, b.states[0].sem);
    assert!(a.states[1].sem.max_abs_diff(&b.states[1].sem) > 0.0);
}

#[test]
fn empty_ap_stream_matches_rp_variant() {
    let d = doc(6);
    let rp = Model::init(small(Variant::Rp), 13).unwrap();
    let mut c = small(Variant::Dstg);
    c.d_ap = 0;
    let dstg = Model { config: c, params: rp.params.clone() };
    let a = rp.inspect(&input(&d)).unwrap();
    let b = dstg.inspect(&input(&d)).unwrap();
    assert_eq!(a.states, b.states);
}

#[test]
fn two_word_head_is_an_affine_map() {
    let mut c = small(Variant::Rp);
    c.vocab_size = 2;
    c.layers = 0;
    let mut m = Model::init(c.clone(), 0).unwrap().cast::<f64>();
    m.params.get_mut("head.b").unwrap().data_mut().copy_from_slice(&[0.25, -1.0]);
    let ids = [0, 1, 0];
    let pos = [0, 1, 2];
    let special = [true, false, true];
    let inp = EncoderInput { ids: &ids, positions: &pos, special: &special };
    let mut g = Graph::new();
    let bound = m.bind(&mut g, false);
    let trace = m.forward(&mut g, &bound, &inp, ForwardOptions::default()).unwrap();
    let logits = m.mlm_logits(&mut g, &bound, trace.final_state(), Some(&[1])).unwrap();
    let x = g.value(trace.final_state().sem).row(1).to_vec();
    let ms: f64 = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let r = 1.0 / (ms + c.norm_eps).sqrt();
    let w = m.params.get("head.w").unwrap();
    for (v, b) in [(0, 0.25), (1, -1.0)] {
        let want: f64 = (0..8).map(|k| x[k] * r * w.get2(k, v)).sum::<f64>() + b;
        assert!((g.value(logits).get2(0, v) - want).abs() < 1e-12);
    }
}

#[test]
fn input_errors() {
    let m = Model::init(small(Variant::Rope), 0).unwrap();
    let ids: Vec<usize> = vec![1; 17];
    let pos: Vec<usize> = (0..17).collect();
    let sp = vec![false; 17];
    assert!(m.inspect(&EncoderInput { ids: &ids, positions: &pos, special: &sp }).is_err());
    assert!(m.inspect(&EncoderInput { ids: &[1, 2], positions: &[0], special: &[false, false] }).is_err());
    assert!(m.inspect(&EncoderInput { ids: &[11], positions: &[0], special: &[false] }).is_err());
}

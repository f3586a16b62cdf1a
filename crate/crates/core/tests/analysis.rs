// SPDX-License-Identifier: MIT OR Apache-2.0

use dstg_core::analysis::*;
use dstg_core::corpus::{BoundarySet, Document, Vocab};
use dstg_core::model::{EncoderInput, MlmScope, Model, ModelConfig, Stream, Variant};
use dstg_core::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn naive_dct(x: &[f64]) -> Vec<f64> {
    let m = x.len() as f64;
    (0..x.len())
        .map(|k| {
            let mut s = 0.0;
            for (n, v) in x.iter().enumerate() {
                s += v * (std::f64::consts::PI * (2.0 * n as f64 + 1.0) * k as f64 / (2.0 * m)).cos();
            }
            s
        })
        .collect()
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    a.qr().q()
}

fn noise(r: usize, c: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal))
}

#[test]
fn dct_constant_signal_is_all_bin_zero() {
    let s = dct_power_shares(&[2.5; 16]);
    assert!((s[0] - 1.0).abs() < 1e-12);
}

#[test]
fn dct_basis_vector_concentrates_in_its_bin() {
    let m = 64;
    let x: Vec<f64> = (0..m).map(|n| (std::f64::consts::PI * (n as f64 + 0.5) * 3.0 / m as f64).cos()).collect();
    assert!(dct_power_shares(&x)[3] >= 0.99);
}

#[test]
fn dct_matches_naive_and_energy_relation() {
    let x: Vec<f64> = noise(1, 37, 4).iter().copied().collect();
    let fast = dct_type2(&x);
    let slow = naive_dct(&x);
    for (a, b) in fast.iter().zip(&slow) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }
    // Orthonormal scaling: (1/m)X_0² + (2/m)Σ_{k≥1} X_k² = Σ x².
    let m = x.len() as f64;
    let energy: f64 = x.iter().map(|v| v * v).sum();
    let spectral = fast[0] * fast[0] / m + fast[1..].iter().map(|v| 2.0 * v * v / m).sum::<f64>();
    assert!((energy - spectral).abs() / energy < 1e-6);
}

#[test]
fn planted_sinusoid_variance() {
    let (m, d) = (128, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = random_orthogonal(d, &mut rng);
    let base = DMatrix::from_fn(m, d, |p, j| {
        let t = 2.0 * std::f64::consts::PI * p as f64 / m as f64;
        match j {
            0 => t.sin(),
            1 => t.cos(),
            _ => 0.0,
        }
    });
    let r = embedding_spectrum(&(base * q));
    assert!(r.variance_ratio[0] + r.variance_ratio[1] >= 0.999);
    assert!((r.variance_ratio.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    for shares in &r.dct_power {
        assert!(shares.iter().all(|s| (0.0..=1.0).contains(s)));
    }
}

#[test]
fn noise_spectrum_is_spread_out() {
    let r = embedding_spectrum(&noise(512, 48, 11));
    assert!(r.variance_ratio[0] + r.variance_ratio[1] < 0.15);
}

#[test]
fn constant_matrix_has_zero_variance() {
    let r = embedding_spectrum(&DMatrix::from_element(10, 4, 3.0));
    assert_eq!(r.total_variance, 0.0);
    assert!(r.variance_ratio.iter().all(|&v| v == 0.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn spectrum_is_invariant_to_orthogonal_column_maps(seed in 0u64..1000) {
        let e = noise(40, 6, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let q = random_orthogonal(6, &mut rng);
        let a = embedding_spectrum(&e);
        let b = embedding_spectrum(&(&e * q));
        for (x, y) in a.variance_ratio.iter().zip(&b.variance_ratio) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn kl_is_non_negative(p in prop::collection::vec(0.01f64..1.0, 2..8), q in prop::collection::vec(0.01f64..1.0, 8)) {
        let sp: f64 = p.iter().sum();
        let q = &q[..p.len()];
        let sq: f64 = q.iter().sum();
        let p: Vec<f64> = p.iter().map(|v| v / sp).collect();
        let q: Vec<f64> = q.iter().map(|v| v / sq).collect();
        prop_assert!(kl_divergence(&p, &q) >= -1e-15);
    }
}

#[test]
fn two_by_two_kl() {
    let kl = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]);
    let want = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
    assert!((kl - want).abs() < 1e-12);
    assert!((kl - 0.5108).abs() < 1e-4);
}

fn small_dstg(seed: u64) -> Model {
    let mut c = ModelConfig::desk(Variant::Dstg, 20);
    c.d_sem = 8;
    c.d_ap = 4;
    c.heads = 2;
    c.max_positions = 16;
    c.init_std = 0.5;
    let mut m = Model::init(c, seed).unwrap();
    for l in 0..2 {
        let t = m.params.get_mut(&format!("layers.{l}.rp_bias")).unwrap();
        for (k, v) in t.data_mut().iter_mut().enumerate() {
            *v = ((k * 31) % 17) as f32 / 17.0 - 0.5;
        }
    }
    m
}

fn doc_inputs(n_docs: usize, n: usize) -> Vec<DocInput> {
    (0..n_docs)
        .map(|d| DocInput {
            ids: (0..n).map(|i| if i == 0 { 2 } else if i == n - 1 { 3 } else { 6 + (i * 5 + d) % 14 }).collect(),
            positions: (0..n).collect(),
            special: (0..n).map(|i| i == 0 || i == n - 1).collect(),
        })
        .collect()
}

#[test]
fn influence_scores_are_valid() {
    let m = small_dstg(1);
    let rows = head_influence_all(&m, &doc_inputs(3, 9), InfluenceOptions::default()).unwrap();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        assert!(r.raw.iter().all(|&s| s >= 0.0));
        assert!((r.normalized.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.normalized.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn zeroed_ap_head_has_no_ap_score() {
    let mut m = small_dstg(2);
    let dh = m.config.d_head();
    for w in ["layers.1.wq_ap", "layers.1.wk_ap"] {
        let t = m.params.get_mut(w).unwrap();
        let cols = t.cols();
        for r in 0..t.rows() {
            for c in 0..dh {
                t.data_mut()[r * cols + c] = 0.0;
            }
        }
    }
    let s = head_influence(&m, &doc_inputs(2, 8), 1, 0, InfluenceOptions::default()).unwrap();
    assert_eq!(s.raw[1], 0.0);
    assert!(s.raw[0] > 0.0);
}

#[test]
fn influence_is_document_order_independent() {
    let m = small_dstg(3);
    let mut docs = doc_inputs(4, 7);
    let a = head_influence_all(&m, &docs, InfluenceOptions::default()).unwrap();
    docs.reverse();
    let b = head_influence_all(&m, &docs, InfluenceOptions::default()).unwrap();
    for (x, y) in a.iter().zip(&b) {
        for c in 0..3 {
            assert!((x.raw[c] - y.raw[c]).abs() < 1e-12);
        }
    }
}

#[test]
fn baselines_are_rejected() {
    let m = Model::init(ModelConfig::desk(Variant::Rope, 20), 0).unwrap();
    let err = head_influence_all(&m, &doc_inputs(1, 5), InfluenceOptions::default()).unwrap_err();
    assert!(matches!(err, Error::RequiresDstg(_)));
    assert!(err.to_string().contains("requires a DSTG model"));
}

#[test]
fn maps_match_live_attention_and_relative_structure() {
    let m = small_dstg(4);
    let d = &doc_inputs(1, 10)[0];
    let maps = attention_maps(&m, &d.input(), 1).unwrap();
    let live = m.cast::<f64>().inspect(&d.input()).unwrap();
    for (h, mp) in maps.iter().enumerate() {
        assert_eq!(mp.combined, live.heads[1][h].probs);
        for (_, t) in mp.named() {
            for i in 0..10 {
                assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        // Inside the regular block the relative map depends on i − j only.
        let b = live.heads[1][h].bias.as_ref().unwrap();
        for i in 2..9 {
            for j in 2..9 {
                assert_eq!(b.get2(i, j), b.get2(i - 1, j - 1));
            }
        }
    }
}

#[test]
fn semantic_map_is_exchange_symmetric() {
    let mut m = small_dstg(5);
    m.config.layers = 1;
    let ids = [2, 7, 9, 7, 3];
    let pos = [0, 1, 2, 3, 4];
    let special = [true, false, false, false, true];
    let maps = attention_maps(&m, &EncoderInput { ids: &ids, positions: &pos, special: &special }, 0).unwrap();
    for mp in &maps {
        // Swapping the two copies of token 7 (positions 1 and 3) maps row 1 onto row 3.
        let perm = [0, 3, 2, 1, 4];
        for j in 0..5 {
            assert!((mp.sem.get2(1, j) - mp.sem.get2(3, perm[j])).abs() < 1e-12);
        }
    }
}

#[test]
fn maps_write_csv_and_svg() {
    let m = small_dstg(6);
    let d = &doc_inputs(1, 6)[0];
    let maps = attention_maps(&m, &d.input(), 0).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_attention_maps(dir.path(), 0, &maps).unwrap();
    for h in 0..2 {
        for c in ["sem", "ap", "rp", "combined"] {
            assert!(dir.path().join(format!("attn_L0_H{h}_{c}.csv")).exists());
            let svg = std::fs::read_to_string(dir.path().join(format!("attn_L0_H{h}_{c}.svg"))).unwrap();
            assert!(svg.starts_with("<svg"));
        }
    }
}

fn toy_vocab() -> Vocab {
    let mut t: Vec<String> = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[NL]", "."].iter().map(|s| s.to_string()).collect();
    t.extend((0..13).map(|i| format!("w{i}")));
    Vocab::from_tokens(t).unwrap()
}

#[test]
fn hidden_pca_smoke_and_exclusion() {
    let m = small_dstg(7);
    let v = toy_vocab();
    let doc = Document { ids: vec![2, 7, 8, 6, 9, 10, 11, 6, 3], offsets: vec![(0, 0); 9] };
    let h = hidden_pca(&m, &doc, &v, &BoundarySet::default(), 1, Stream::Ap).unwrap();
    assert_eq!(h.segment_id, vec![0, 0, 0, 1, 1, 1, 1]);
    assert!(h.coords.iter().all(|c| c[0].is_finite() && c[1].is_finite()));
    assert!(h.variance_ratio.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    assert!(h.variance_ratio.iter().sum::<f64>() <= 1.0 + 1e-9);
    assert!(hidden_pca(&m, &doc, &v, &BoundarySet::default(), 2, Stream::Ap).is_err());
    assert!(hidden_pca(&m, &doc, &v, &BoundarySet::default(), 2, Stream::Sem).is_ok());
    let mut full = m.clone();
    full.config.mlm_scope = MlmScope::Full;
    full.params.push("head.norm_ap", dstg_core::numerics::Tensor::ones(&[4]), false).unwrap();
    assert!(hidden_pca(&full, &doc, &v, &BoundarySet::default(), 2, Stream::Ap).is_ok());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("hidden_pca_L1.csv");
    write_hidden_pca_csv(&p, &h).unwrap();
    assert!(std::fs::read_to_string(p).unwrap().starts_with("token_index,pc1,pc2,segment_id\n"));
}

fn silhouette(points: &[[f64; 2]], labels: &[usize]) -> f64 {
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let mean_to = |c: usize| {
            let (s, k) = (0..n)
                .filter(|&j| j != i && labels[j] == c)
                .fold((0.0, 0), |(s, k), j| (s + dist(&points[i], &points[j]), k + 1));
            s / k as f64
        };
        let a = mean_to(labels[i]);
        let b = mean_to(1 - labels[i]);
        total += (b - a) / a.max(b);
    }
    total / n as f64
}

#[test]
fn planted_clusters_separate_in_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 12;
    let centre: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal) * 3.0).collect();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..60 {
        let c = i % 2;
        for j in 0..d {
            let mu = if c == 0 { centre[j] } else { -centre[j] };
            rows.push(mu + 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(c);
    }
    let x = DMatrix::from_row_slice(60, d, &rows);
    let p = pca_2d(&x);
    assert!(silhouette(&p.coords, &labels) > 0.8);
}

#[test]
fn inter_model_regression_cases() {
    let x = noise(300, 6, 9);
    assert!(inter_model_regression(&x, &x, 1e-8, 0.2, 0).unwrap() >= 0.999);
    let w = noise(6, 4, 10);
    assert!(inter_model_regression(&x, &(&x * w), 1e-6, 0.2, 0).unwrap() >= 0.999);
    assert!(inter_model_regression(&x, &noise(300, 4, 11), 1.0, 0.2, 0).unwrap() <= 0.05);
    assert!(inter_model_regression(&x, &noise(299, 4, 11), 1.0, 0.2, 0).is_err());
}

#[test]
fn matrix_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.csv");
    let m = noise(5, 3, 12);
    write_matrix_csv(&p, &m).unwrap();
    assert_eq!(read_matrix_csv(&p).unwrap(), m);
    std::fs::write(&p, "a,b\n1,2\n3\n").unwrap();
    assert!(read_matrix_csv(&p).is_err());
}

#[test]
fn spectrum_and_heads_csv_headers() {
    let dir = tempfile::tempdir().unwrap();
    let r = embedding_spectrum(&noise(20, 3, 1));
    write_spectrum_csv(&dir.path().join("spectrum.csv"), &r).unwrap();
    let s = std::fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    assert!(s.starts_with("pc,variance_ratio,lowfreq_share\n1,"));
    let rows = head_influence_all(&small_dstg(1), &doc_inputs(1, 6), InfluenceOptions::default()).unwrap();
    write_heads_csv(&dir.path().join("heads.csv"), &rows).unwrap();
    let h = std::fs::read_to_string(dir.path().join("heads.csv")).unwrap();
    assert!(h.starts_with("layer,head,score_sem,score_ap,score_rp,norm_sem,norm_ap,norm_rp\n"));
    assert_eq!(h.lines().count(), 5);
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inspection tools for trained encoders: PCA and DCT spectra of embedding
//! tables, PCA of hidden states, per-component attention maps, the KL
//! ablation taxonomy of heads, and ridge maps between two models' states.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::corpus::{segment_labels, BoundarySet, Document, Vocab};
use crate::error::{Error, Result};
use crate::model::{EncoderInput, HeadValues, MlmScope, Model, Stream, Variant};
use crate::numerics::{softmax_rows, Scalar, Tensor};
use crate::probes::{r2, ridge_fit_multi};
use crate::rng::{stream, Purpose};

/// Number of leading DCT bins counted as low frequency.
pub const LOW_FREQ_BINS: usize = 4;

/// `X_k = Σ_n x_n cos(π (n + ½) k / m)`.
pub fn dct_type2(signal: &[f64]) -> Vec<f64> {
    let m = signal.len();
    let mf = m as f64;
    (0..m)
        .map(|k| {
            signal
                .iter()
                .enumerate()
                .map(|(n, &x)| x * (std::f64::consts::PI * (n as f64 + 0.5) * k as f64 / mf).cos())
                .sum()
        })
        .collect()
}

/// Share of DCT power per bin. All zeros for a zero signal.
pub fn dct_power_shares(signal: &[f64]) -> Vec<f64> {
    let power: Vec<f64> = dct_type2(signal).iter().map(|x| x * x).collect();
    let total: f64 = power.iter().sum();
    if total > 0.0 {
        power.iter().map(|p| p / total).collect()
    } else {
        vec![0.0; power.len()]
    }
}

/// Principal components of the rows of a matrix.
#[derive(Clone, Debug)]
pub struct Pca {
    /// Share of total variance per component, descending.
    pub variance_ratio: Vec<f64>,
    pub total_variance: f64,
    /// `rows × k` projections of the centered rows onto the components.
    pub scores: DMatrix<f64>,
    /// `d × k` unit directions.
    pub components: DMatrix<f64>,
}

pub fn to_dmatrix<T: Scalar>(t: &Tensor<T>) -> Result<DMatrix<f64>> {
    let (r, c) = t.dims2()?;
    Ok(DMatrix::from_row_iterator(r, c, t.data().iter().map(|v| v.as_f64())))
}

/// PCA via the SVD of the column-centered matrix. A matrix with zero
/// variance yields zero ratios.
pub fn pca(x: &DMatrix<f64>) -> Pca {
    let (r, c) = x.shape();
    let mut centered = x.clone();
    for j in 0..c {
        let mean = centered.column(j).sum() / r.max(1) as f64;
        centered.column_mut(j).add_scalar_mut(-mean);
    }
    let total_variance = centered.iter().map(|v| v * v).sum::<f64>() / r.max(1) as f64;
    let k = r.min(c);
    if total_variance == 0.0 || k == 0 {
        return Pca {
            variance_ratio: vec![0.0; k],
            total_variance: 0.0,
            scores: DMatrix::zeros(r, k),
            components: DMatrix::zeros(c, k),
        };
    }
    let svd = centered.clone().svd(true, true);
    let (u, vt) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let ss: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut scores = DMatrix::zeros(r, k);
    let mut components = DMatrix::zeros(c, k);
    let mut variance_ratio = Vec::with_capacity(k);
    for (slot, &i) in order.iter().take(k).enumerate() {
        let s = svd.singular_values[i];
        variance_ratio.push(s * s / ss);
        scores.set_column(slot, &(u.column(i) * s));
        components.set_column(slot, &vt.row(i).transpose());
    }
    Pca { variance_ratio, total_variance, scores, components }
}

#[derive(Clone, Debug)]
pub struct SpectrumReport {
    pub variance_ratio: Vec<f64>,
    pub total_variance: f64,
    /// DCT power shares of each component's series over positions.
    pub dct_power: Vec<Vec<f64>>,
    /// Power in the first [`LOW_FREQ_BINS`] bins over the total, per component.
    pub lowfreq_share: Vec<f64>,
}

/// PCA of an `m × d` embedding table (rows are positions) followed by a DCT
/// of each component's position series.
pub fn embedding_spectrum(e: &DMatrix<f64>) -> SpectrumReport {
    let p = pca(e);
    let mut dct_power = Vec::with_capacity(p.scores.ncols());
    let mut lowfreq_share = Vec::with_capacity(p.scores.ncols());
    for k in 0..p.scores.ncols() {
        let series: Vec<f64> = p.scores.column(k).iter().copied().collect();
        let shares = dct_power_shares(&series);
        lowfreq_share.push(shares.iter().take(LOW_FREQ_BINS).sum());
        dct_power.push(shares);
    }
    SpectrumReport { variance_ratio: p.variance_ratio, total_variance: p.total_variance, dct_power, lowfreq_share }
}

/// The absolute-position table of a model (`ap_emb` for the disentangled
/// variant, `pos_emb` for the AP baseline).
pub fn position_table<T: Scalar>(model: &Model<T>) -> Result<&Tensor<T>> {
    match model.config.variant {
        Variant::Dstg if model.config.has_ap_stream() => model.params.get("ap_emb"),
        Variant::Ap => model.params.get("pos_emb"),
        _ => Err(Error::Invalid(format!("variant {} has no absolute-position table", model.config.variant))),
    }
}

pub fn write_spectrum_csv(path: &Path, report: &SpectrumReport) -> Result<()> {
    let mut out = String::from("pc,variance_ratio,lowfreq_share\n");
    for (k, (v, l)) in report.variance_ratio.iter().zip(&report.lowfreq_share).enumerate() {
        writeln!(out, "{},{},{}", k + 1, v, l).expect("write to string");
    }
    write_file(path, &out)
}

/// Reads a numeric CSV matrix (one row per line, comma separated). A first
/// line that does not parse is taken as a header.
pub fn read_matrix_csv(path: &Path) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parsed: std::result::Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(_) => return Err(Error::Invalid(format!("{}: line {} is not numeric", path.display(), i + 1))),
        }
    }
    let Some(first) = rows.first() else {
        return Err(Error::Invalid(format!("{} holds no rows", path.display())));
    };
    let d = first.len();
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::Shape(format!("{}: row {} has {} columns, expected {d}", path.display(), i + 1, rows[i].len())));
    }
    Ok(DMatrix::from_row_iterator(rows.len(), d, rows.into_iter().flatten()))
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let mut out = String::new();
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| m[(r, c)].to_string()).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    write_file(path, &out)
}

/// `Σ p log(p / q)` over entries with `p > 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum()
}

/// Component of the attention logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Sem,
    Ap,
    Rp,
}

impl Component {
    pub const ALL: [Component; 3] = [Component::Sem, Component::Ap, Component::Rp];

    pub fn name(self) -> &'static str {
        match self {
            Component::Sem => "sem",
            Component::Ap => "ap",
            Component::Rp => "rp",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadInfluence {
    pub layer: usize,
    pub head: usize,
    /// KL of the live attention from the attention with one component
    /// removed, in [`Component::ALL`] order.
    pub raw: [f64; 3],
    /// `raw` divided by its sum (all zero when the sum is zero).
    pub normalized: [f64; 3],
    pub docs: usize,
}

fn normalize3(raw: [f64; 3]) -> [f64; 3] {
    let s: f64 = raw.iter().sum();
    if s > 0.0 {
        raw.map(|r| r / s)
    } else {
        [0.0; 3]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InfluenceOptions {
    /// Average over [CLS]/[SEP] query rows as well.
    pub include_special_rows: bool,
}

impl Default for InfluenceOptions {
    fn default() -> Self {
        Self { include_special_rows: true }
    }
}

fn require_dstg<T: Scalar>(model: &Model<T>, what: &'static str) -> Result<()> {
    if model.config.variant == Variant::Dstg && model.config.has_ap_stream() {
        Ok(())
    } else {
        Err(Error::RequiresDstg(what))
    }
}

/// Logits with one component left out, rebuilt from the other two in the
/// forward order.
fn ablated_logits(h: &HeadValues<f64>, drop: Component) -> Tensor<f64> {
    let n = h.logits.rows();
    let zero = Tensor::zeros(&[n, n]);
    let ap = h.w_ap.as_ref().unwrap_or(&zero);
    let b = h.bias.as_ref().unwrap_or(&zero);
    let data = (0..n * n)
        .map(|k| {
            let (s, a, r) = (h.w_sem.data()[k], ap.data()[k], b.data()[k]);
            match drop {
                Component::Sem => a + r,
                Component::Ap => s + r,
                Component::Rp => s + a,
            }
        })
        .collect();
    Tensor::new(vec![n, n], data).expect("square")
}

fn head_scores(h: &HeadValues<f64>, special: &[bool], opts: InfluenceOptions) -> Result<[f64; 3]> {
    let n = h.probs.rows();
    let rows: Vec<usize> = (0..n).filter(|&i| opts.include_special_rows || !special[i]).collect();
    if rows.is_empty() {
        return Ok([0.0; 3]);
    }
    let mut out = [0.0; 3];
    for (c, comp) in Component::ALL.iter().enumerate() {
        let q = softmax_rows(&ablated_logits(h, *comp), None)?;
        let total: f64 = rows.iter().map(|&i| kl_divergence(h.probs.row(i), q.row(i))).sum();
        out[c] = total / rows.len() as f64;
    }
    Ok(out)
}

/// Inputs of a document at unshifted positions.
pub struct DocInput {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub special: Vec<bool>,
}

impl DocInput {
    pub fn new(doc: &Document, vocab: &Vocab) -> Self {
        Self { ids: doc.ids.clone(), positions: (0..doc.len()).collect(), special: doc.special_mask(vocab) }
    }

    pub fn input(&self) -> EncoderInput<'_> {
        EncoderInput { ids: &self.ids, positions: &self.positions, special: &self.special }
    }
}

/// Influence scores of every head, averaged uniformly over documents.
pub fn head_influence_all<T: Scalar>(
    model: &Model<T>,
    docs: &[DocInput],
    opts: InfluenceOptions,
) -> Result<Vec<HeadInfluence>> {
    require_dstg(model, "head influence")?;
    if docs.is_empty() {
        return Err(Error::Invalid("head influence needs at least one document".into()));
    }
    let m64 = model.cast::<f64>();
    let (layers, heads) = (model.config.layers, model.config.heads);
    let mut sums = vec![[0.0f64; 3]; layers * heads];
    for d in docs {
        let ins = m64.inspect(&d.input())?;
        for l in 0..layers {
            for h in 0..heads {
                let s = head_scores(&ins.heads[l][h], &d.special, opts)?;
                for c in 0..3 {
                    sums[l * heads + h][c] += s[c];
                }
            }
        }
    }
    Ok((0..layers * heads)
        .map(|k| {
            let raw = sums[k].map(|s| s / docs.len() as f64);
            HeadInfluence { layer: k / heads, head: k % heads, raw, normalized: normalize3(raw), docs: docs.len() }
        })
        .collect())
}

pub fn head_influence<T: Scalar>(
    model: &Model<T>,
    docs: &[DocInput],
    layer: usize,
    head: usize,
    opts: InfluenceOptions,
) -> Result<HeadInfluence> {
    if layer >= model.config.layers || head >= model.config.heads {
        return Err(Error::Invalid(format!("no head {head} in layer {layer}")));
    }
    let all = head_influence_all(model, docs, opts)?;
    Ok(all[layer * model.config.heads + head].clone())
}

pub fn write_heads_csv(path: &Path, rows: &[HeadInfluence]) -> Result<()> {
    let mut out = String::from("layer,head,score_sem,score_ap,score_rp,norm_sem,norm_ap,norm_rp\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.layer, r.head, r.raw[0], r.raw[1], r.raw[2], r.normalized[0], r.normalized[1], r.normalized[2]
        )
        .expect("write to string");
    }
    write_file(path, &out)
}

/// Softmax of each logit component separately, and of their sum.
#[derive(Clone, Debug)]
pub struct HeadMaps {
    pub sem: Tensor<f64>,
    pub ap: Tensor<f64>,
    pub rp: Tensor<f64>,
    pub combined: Tensor<f64>,
}

impl HeadMaps {
    pub fn named(&self) -> [(&'static str, &Tensor<f64>); 4] {
        [("sem", &self.sem), ("ap", &self.ap), ("rp", &self.rp), ("combined", &self.combined)]
    }
}

pub fn attention_maps<T: Scalar>(model: &Model<T>, input: &EncoderInput<'_>, layer: usize) -> Result<Vec<HeadMaps>> {
    require_dstg(model, "attention maps")?;
    if layer >= model.config.layers {
        return Err(Error::Invalid(format!("layer {layer} of {}", model.config.layers)));
    }
    let ins = model.cast::<f64>().inspect(input)?;
    ins.heads[layer]
        .iter()
        .map(|h| {
            let n = h.logits.rows();
            let zero = Tensor::zeros(&[n, n]);
            Ok(HeadMaps {
                sem: softmax_rows(&h.w_sem, None)?,
                ap: softmax_rows(h.w_ap.as_ref().unwrap_or(&zero), None)?,
                rp: softmax_rows(h.bias.as_ref().unwrap_or(&zero), None)?,
                combined: softmax_rows(&h.logits, None)?,
            })
        })
        .collect()
}

/// `attn_L{l}_H{h}_{component}.csv` and `.svg` for every head of a layer.
pub fn write_attention_maps(dir: &Path, layer: usize, maps: &[HeadMaps]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (h, m) in maps.iter().enumerate() {
        for (name, t) in m.named() {
            let stem = format!("attn_L{layer}_H{h}_{name}");
            let dm = to_dmatrix(t)?;
            write_matrix_csv(&dir.join(format!("{stem}.csv")), &dm)?;
            write_file(&dir.join(format!("{stem}.svg")), &heatmap_svg(&dm, 8))?;
        }
    }
    Ok(())
}

/// Heatmap with one square per cell, scaled to the map's own min/max and
/// mapped from white to dark blue.
pub fn heatmap_svg(m: &DMatrix<f64>, cell: usize) -> String {
    let (r, c) = m.shape();
    let lo = m.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" shape-rendering=\"crispEdges\">\n",
        c * cell,
        r * cell
    );
    for i in 0..r {
        for j in 0..c {
            let t = if r * c > 0 { (m[(i, j)] - lo) / span } else { 0.0 };
            let ch = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
            writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{cell}\" height=\"{cell}\" fill=\"#{:02x}{:02x}{:02x}\"/>",
                j * cell,
                i * cell,
                ch(255.0, 8.0),
                ch(255.0, 48.0),
                ch(255.0, 107.0)
            )
            .expect("write to string");
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Two-dimensional PCA of a point cloud.
#[derive(Clone, Debug)]
pub struct Projection2d {
    pub coords: Vec<[f64; 2]>,
    pub variance_ratio: Vec<f64>,
}

pub fn pca_2d(x: &DMatrix<f64>) -> Projection2d {
    let p = pca(x);
    let coords = (0..x.nrows())
        .map(|i| {
            let at = |k: usize| if k < p.scores.ncols() { p.scores[(i, k)] } else { 0.0 };
            [at(0), at(1)]
        })
        .collect();
    Projection2d { coords, variance_ratio: p.variance_ratio }
}

#[derive(Clone, Debug)]
pub struct HiddenPca {
    pub layer: usize,
    pub stream: Stream,
    pub token_index: Vec<usize>,
    pub segment_id: Vec<usize>,
    pub coords: Vec<[f64; 2]>,
    pub variance_ratio: Vec<f64>,
}

/// Whether the AP stream at `layer` (0 = embeddings, `L` = final output) is
/// excluded from analysis: under the semantic-only head the final AP state
/// is never trained.
pub fn ap_layer_excluded(config: &crate::model::ModelConfig, layer: usize) -> bool {
    config.has_ap_stream() && config.mlm_scope == MlmScope::SemanticOnly && layer == config.layers
}

/// PCA of one document's hidden states at `layer` (0 = embeddings), with
/// each regular token labelled by its segment.
pub fn hidden_pca<T: Scalar>(
    model: &Model<T>,
    doc: &Document,
    vocab: &Vocab,
    boundaries: &BoundarySet,
    layer: usize,
    stream: Stream,
) -> Result<HiddenPca> {
    let c = &model.config;
    if layer > c.layers {
        return Err(Error::Invalid(format!("layer {layer} of {}", c.layers)));
    }
    if stream == Stream::Ap && !c.has_ap_stream() {
        return Err(Error::RequiresDstg("AP-stream PCA"));
    }
    if stream == Stream::Ap && ap_layer_excluded(c, layer) {
        return Err(Error::Invalid(format!(
            "the AP stream of the final layer {layer} receives no training signal and is not analysed"
        )));
    }
    let input = DocInput::new(doc, vocab);
    let ins = model.inspect(&input.input())?;
    let feats = stream.select(&ins.states[layer]).expect("stream checked");
    let labels = segment_labels(doc, vocab, boundaries);
    let token_index: Vec<usize> = (0..doc.len()).filter(|&i| labels.segment[i].is_some()).collect();
    let full = to_dmatrix(&feats)?;
    let x = full.select_rows(&token_index);
    let proj = pca_2d(&x);
    Ok(HiddenPca {
        layer,
        stream,
        segment_id: token_index.iter().map(|&i| labels.segment[i].expect("regular token")).collect(),
        token_index,
        coords: proj.coords,
        variance_ratio: proj.variance_ratio,
    })
}

pub fn write_hidden_pca_csv(path: &Path, h: &HiddenPca) -> Result<()> {
    let mut out = String::from("token_index,pc1,pc2,segment_id\n");
    for ((t, c), s) in h.token_index.iter().zip(&h.coords).zip(&h.segment_id) {
        writeln!(out, "{t},{},{},{s}", c[0], c[1]).expect("write to string");
    }
    write_file(path, &out)
}

/// Ridge map from one set of hidden states to another over the same tokens,
/// scored by R² on held-out tokens and averaged over target dimensions with
/// nonzero variance.
pub fn inter_model_regression(
    src: &DMatrix<f64>,
    dst: &DMatrix<f64>,
    lambda: f64,
    test_frac: f64,
    seed: u64,
) -> Result<f64> {
    let n = src.nrows();
    if dst.nrows() != n {
        return Err(Error::Shape(format!("{n} source tokens but {} target tokens", dst.nrows())));
    }
    if !(test_frac > 0.0 && test_frac < 1.0) {
        return Err(Error::Invalid(format!("test fraction {test_frac} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::Analysis, 0));
    let n_test = ((n as f64 * test_frac).round() as usize).clamp(1, n.saturating_sub(2).max(1));
    let (test, train) = order.split_at(n_test);
    let (xtr, ytr) = (src.select_rows(train), dst.select_rows(train));
    let (xte, yte) = (src.select_rows(test), dst.select_rows(test));
    let fit = ridge_fit_multi(&xtr, &ytr, lambda)?;
    let pred = fit.predict(&xte);
    let mut scores = Vec::new();
    for j in 0..dst.ncols() {
        let y: Vec<f64> = yte.column(j).iter().copied().collect();
        let p: Vec<f64> = pred.column(j).iter().copied().collect();
        if let Ok(s) = r2(&p, &y) {
            scores.push(s);
        }
    }
    if scores.is_empty() {
        return Err(Error::Invalid("every target dimension is constant on the held-out tokens".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Hidden states of `stream` at `layer` for every regular token of `docs`,
/// stacked in document order.
pub fn stacked_states<T: Scalar>(
    model: &Model<T>,
    docs: &[Document],
    vocab: &Vocab,
    layer: usize,
    stream: Stream,
) -> Result<DMatrix<f64>> {
    if layer > model.config.layers {
        return Err(Error::Invalid(format!("layer {layer} of {}", model.config.layers)));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for d in docs {
        let input = DocInput::new(d, vocab);
        let ins = model.inspect(&input.input())?;
        let f = stream
            .select(&ins.states[layer])
            .ok_or_else(|| Error::Invalid(format!("model has no {} stream", stream.name())))?;
        for i in 0..d.len() {
            if !input.special[i] {
                rows.push(f.row(i).iter().map(|v| v.as_f64()).collect());
            }
        }
    }
    let d = rows.first().map_or(0, Vec::len);
    Ok(DMatrix::from_row_iterator(rows.len(), d, rows.into_iter().flatten()))
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Linear structural probes: position, segment and intra-segment targets,
//! ridge regression, R², and per-layer, per-stream reports.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;

use crate::analysis::{ap_layer_excluded, write_file, DocInput};
use crate::corpus::{segment_labels, BoundarySet, Document, SegmentLabels, Vocab};
use crate::error::{Error, Result};
use crate::model::{Model, Stream};
use crate::numerics::Scalar;
use crate::rng::{stream, Purpose};

/// Ridge solution with an unpenalized intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeFit {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl RidgeFit {
    pub fn predict(&self, x: &DMatrix<f64>) -> Vec<f64> {
        (0..x.nrows())
            .map(|i| self.intercept + (0..x.ncols()).map(|j| x[(i, j)] * self.weights[j]).sum::<f64>())
            .collect()
    }
}

/// Ridge solution for several targets sharing one design matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct RidgeMulti {
    /// `d × t`.
    pub weights: DMatrix<f64>,
    pub intercept: DVector<f64>,
}

impl RidgeMulti {
    pub fn predict(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut p = x * &self.weights;
        for mut row in p.row_iter_mut() {
            row += self.intercept.transpose();
        }
        p
    }
}

/// Lower-triangular `L` with `A = L Lᵀ`, or `None` if `A` is not positive definite.
fn cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` for every column of `b`.
fn cholesky_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut x = b.clone();
    for c in 0..b.ncols() {
        for i in 0..n {
            let mut s = x[(i, c)];
            for k in 0..i {
                s -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut s = x[(i, c)];
            for k in i + 1..n {
                s -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = s / l[(i, i)];
        }
    }
    x
}

/// Minimises `‖Y − X W − 1 bᵀ‖² + λ ‖W‖²` through the centered normal equations.
pub fn ridge_fit_multi(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<RidgeMulti> {
    let (n, d) = x.shape();
    if y.nrows() != n {
        return Err(Error::Shape(format!("{n} feature rows but {} target rows", y.nrows())));
    }
    if n == 0 {
        return Err(Error::Invalid("ridge fit needs at least one row".into()));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Invalid(format!("lambda {lambda} must be finite and non-negative")));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("ridge inputs contain non-finite values".into()));
    }
    let x_mean = x.row_mean();
    let y_mean = y.row_mean();
    let mut xc = x.clone();
    for mut row in xc.row_iter_mut() {
        row -= &x_mean;
    }
    let mut yc = y.clone();
    for mut row in yc.row_iter_mut() {
        row -= &y_mean;
    }
    let mut a = xc.transpose() * &xc;
    for i in 0..d {
        a[(i, i)] += lambda;
    }
    let b = xc.transpose() * &yc;
    let l = cholesky(&a)
        .ok_or_else(|| Error::Invalid("normal equations are singular; increase lambda".into()))?;
    let weights = cholesky_solve(&l, &b);
    let intercept = (y_mean - x_mean * &weights).transpose();
    Ok(RidgeMulti { weights, intercept })
}

pub fn ridge_fit(x: &DMatrix<f64>, y: &[f64], lambda: f64) -> Result<RidgeFit> {
    let ym = DMatrix::from_column_slice(y.len(), 1, y);
    let m = ridge_fit_multi(x, &ym, lambda)?;
    Ok(RidgeFit { weights: m.weights.column(0).iter().copied().collect(), intercept: m.intercept[0] })
}

/// `1 − SS_res / SS_tot`.
pub fn r2(pred: &[f64], y: &[f64]) -> Result<f64> {
    if pred.len() != y.len() || y.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} targets", pred.len(), y.len())));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    if ss_tot == 0.0 {
        return Err(Error::Invalid("R² is undefined for a constant target".into()));
    }
    let ss_res: f64 = pred.iter().zip(y).map(|(p, v)| (v - p) * (v - p)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Target {
    /// Position over the maximum position count.
    TokenAp,
    /// Index of the token's segment.
    Segment,
    /// Progress inside the segment, from 0 to 1.
    IntraSegment,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::TokenAp, Target::Segment, Target::IntraSegment];

    pub fn name(self) -> &'static str {
        match self {
            Target::TokenAp => "token_ap",
            Target::Segment => "segment",
            Target::IntraSegment => "intra_segment",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "token_ap" => Ok(Target::TokenAp),
            "segment" => Ok(Target::Segment),
            "intra_segment" => Ok(Target::IntraSegment),
            other => Err(Error::Config(format!("unknown probe target {other:?}"))),
        }
    }
}

/// `pos / max_positions` for regular tokens.
pub fn target_token_ap(positions: &[usize], special: &[bool], max_positions: usize) -> Vec<Option<f64>> {
    positions
        .iter()
        .zip(special)
        .map(|(&p, &s)| (!s).then(|| p as f64 / max_positions as f64))
        .collect()
}

pub fn target_segment(labels: &SegmentLabels) -> Vec<Option<f64>> {
    labels.segment.iter().map(|s| s.map(|v| v as f64)).collect()
}

pub fn target_intra_segment(labels: &SegmentLabels) -> Vec<Option<f64>> {
    labels.intra.clone()
}

/// Features and one target over many documents; rows remember their document.
#[derive(Clone, Debug)]
pub struct ProbeDataset {
    pub features: DMatrix<f64>,
    pub targets: Vec<f64>,
    pub doc_of_row: Vec<usize>,
    pub n_docs: usize,
}

/// 80/20 split of document indices, shuffled by `seed`.
pub fn split_documents(n_docs: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_docs < 2 {
        return Err(Error::Invalid(format!("a train/test split needs at least 2 documents, got {n_docs}")));
    }
    let mut order: Vec<usize> = (0..n_docs).collect();
    order.shuffle(&mut stream(seed, Purpose::ProbeSplit, 0));
    let n_test = ((n_docs as f64 * 0.2).round() as usize).clamp(1, n_docs - 1);
    let test = order[..n_test].to_vec();
    let train = order[n_test..].to_vec();
    Ok((train, test))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeCell {
    pub r2_mean: f64,
    /// Sample standard deviation over seeds (0 for a single seed).
    pub r2_std: f64,
    pub r2_per_seed: Vec<f64>,
    pub n_train_docs: usize,
    pub n_test_docs: usize,
}

/// Fits on the train documents and scores R² on the test documents, once per seed.
pub fn evaluate_probe(data: &ProbeDataset, seeds: &[u64], lambda: f64) -> Result<ProbeCell> {
    if seeds.is_empty() {
        return Err(Error::Invalid("need at least one seed".into()));
    }
    let mut scores = Vec::with_capacity(seeds.len());
    let (mut n_train, mut n_test) = (0, 0);
    for &seed in seeds {
        let (train, test) = split_documents(data.n_docs, seed)?;
        let mut is_test = vec![false; data.n_docs];
        for &d in &test {
            is_test[d] = true;
        }
        let (tr, te): (Vec<usize>, Vec<usize>) = (0..data.targets.len()).partition(|&r| !is_test[data.doc_of_row[r]]);
        let fit = ridge_fit(&data.features.select_rows(&tr), &tr.iter().map(|&r| data.targets[r]).collect::<Vec<_>>(), lambda)?;
        let pred = fit.predict(&data.features.select_rows(&te));
        scores.push(r2(&pred, &te.iter().map(|&r| data.targets[r]).collect::<Vec<_>>())?);
        n_train = train.len();
        n_test = test.len();
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let std = if scores.len() > 1 {
        (scores.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (scores.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(ProbeCell { r2_mean: mean, r2_std: std, r2_per_seed: scores, n_train_docs: n_train, n_test_docs: n_test })
}

/// How probe layers are numbered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerIndexing {
    /// Layer 0 is the embedding output; layer `l` the output of block `l`.
    Embeddings,
    /// Layer `l` is the output of block `l + 1`.
    Blocks,
}

#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub seeds: Vec<u64>,
    pub lambda: f64,
    pub layers: LayerIndexing,
    pub boundaries: BoundarySet,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { seeds: (0..5).collect(), lambda: 1.0, layers: LayerIndexing::Embeddings, boundaries: BoundarySet::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRow {
    pub layer: usize,
    pub stream: Stream,
    /// `None` where the stream is not probed.
    pub cell: Option<ProbeCell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub label: String,
    pub target: Target,
    pub lambda: f64,
    pub seeds: usize,
    pub rows: Vec<ProbeRow>,
}

impl ProbeReport {
    pub fn cell(&self, layer: usize, stream: Stream) -> Option<&ProbeCell> {
        self.rows.iter().find(|r| r.layer == layer && r.stream == stream).and_then(|r| r.cell.as_ref())
    }

    pub fn layers(&self) -> Vec<usize> {
        let mut l: Vec<usize> = self.rows.iter().map(|r| r.layer).collect();
        l.dedup();
        l
    }
}

/// Streams probed for a model: both streams and their concatenation when the
/// model keeps them apart, otherwise the single hidden state.
pub fn probe_streams<T: Scalar>(model: &Model<T>) -> Vec<Stream> {
    if model.config.has_ap_stream() {
        vec![Stream::Ap, Stream::Sem, Stream::All]
    } else {
        vec![Stream::All]
    }
}

struct DocStates {
    states: Vec<crate::model::StreamValues<f64>>,
    regular: Vec<usize>,
    targets: [Vec<Option<f64>>; 3],
}

/// Every probe for one model, all targets.
pub fn probe_model<T: Scalar>(
    label: &str,
    model: &Model<T>,
    docs: &[Document],
    vocab: &Vocab,
    opts: &ProbeOptions,
) -> Result<Vec<ProbeReport>> {
    let c = &model.config;
    if c.vocab_size != vocab.len() {
        return Err(Error::Invalid(format!(
            "{label}: model vocabulary of {} does not match the tokenizer's {}",
            c.vocab_size,
            vocab.len()
        )));
    }
    if let Some(d) = docs.iter().find(|d| d.len() > c.max_positions) {
        return Err(Error::Invalid(format!("{label}: document of {} tokens exceeds {}", d.len(), c.max_positions)));
    }
    let m64 = model.cast::<f64>();
    let mut per_doc = Vec::with_capacity(docs.len());
    for d in docs {
        let input = DocInput::new(d, vocab);
        let ins = m64.inspect(&input.input())?;
        let labels = segment_labels(d, vocab, &opts.boundaries);
        per_doc.push(DocStates {
            states: ins.states,
            regular: (0..d.len()).filter(|&i| !input.special[i]).collect(),
            targets: [
                target_token_ap(&input.positions, &input.special, c.max_positions),
                target_segment(&labels),
                target_intra_segment(&labels),
            ],
        });
    }
    let layer_states: Vec<(usize, usize)> = match opts.layers {
        LayerIndexing::Embeddings => (0..=c.layers).map(|l| (l, l)).collect(),
        LayerIndexing::Blocks => (1..=c.layers).map(|l| (l - 1, l)).collect(),
    };
    let streams = probe_streams(model);
    let mut reports: Vec<ProbeReport> = Target::ALL
        .iter()
        .map(|&t| ProbeReport { label: label.to_string(), target: t, lambda: opts.lambda, seeds: opts.seeds.len(), rows: Vec::new() })
        .collect();
    for &(layer, state) in &layer_states {
        for &s in &streams {
            if s == Stream::Ap && ap_layer_excluded(c, state) {
                for r in reports.iter_mut() {
                    r.rows.push(ProbeRow { layer, stream: s, cell: None });
                }
                continue;
            }
            let mut rows: Vec<f64> = Vec::new();
            let mut doc_of_row = Vec::new();
            let mut targets: [Vec<f64>; 3] = Default::default();
            let mut width = 0;
            for (di, d) in per_doc.iter().enumerate() {
                let f = s.select(&d.states[state]).expect("stream exists");
                width = f.cols();
                for &i in &d.regular {
                    rows.extend_from_slice(f.row(i));
                    doc_of_row.push(di);
                    for t in 0..3 {
                        targets[t].push(d.targets[t][i].expect("regular token has targets"));
                    }
                }
            }
            let features = DMatrix::from_row_slice(doc_of_row.len(), width, &rows);
            for (t, report) in reports.iter_mut().enumerate() {
                let data = ProbeDataset {
                    features: features.clone(),
                    targets: std::mem::take(&mut targets[t]),
                    doc_of_row: doc_of_row.clone(),
                    n_docs: docs.len(),
                };
                let cell = evaluate_probe(&data, &opts.seeds, opts.lambda)?;
                report.rows.push(ProbeRow { layer, stream: s, cell: Some(cell) });
            }
        }
    }
    Ok(reports)
}

/// Probes every model; models must share the tokenizer.
pub fn run_probe_suite<T: Scalar>(
    models: &[(String, &Model<T>)],
    docs: &[Document],
    vocab: &Vocab,
    opts: &ProbeOptions,
) -> Result<Vec<ProbeReport>> {
    let mut out = Vec::new();
    for (label, m) in models {
        out.extend(probe_model(label, m, docs, vocab, opts)?);
    }
    Ok(out)
}

fn fmt_cell(c: Option<&ProbeCell>, f: impl Fn(&ProbeCell) -> f64) -> String {
    c.map_or_else(|| "NA".to_string(), |c| f(c).to_string())
}

/// `probes_{label}_{target}.csv`.
pub fn probe_csv_name(report: &ProbeReport) -> String {
    format!("probes_{}_{}.csv", report.label, report.target.name())
}

pub fn write_probe_csv(dir: &Path, report: &ProbeReport) -> Result<()> {
    let mut out = String::from("layer,stream,r2_mean,r2_std,n_train_docs,n_test_docs,lambda,seeds\n");
    for r in &report.rows {
        let c = r.cell.as_ref();
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.layer,
            r.stream.name(),
            fmt_cell(c, |c| c.r2_mean),
            fmt_cell(c, |c| c.r2_std),
            c.map_or("NA".into(), |c| c.n_train_docs.to_string()),
            c.map_or("NA".into(), |c| c.n_test_docs.to_string()),
            report.lambda,
            report.seeds
        )
        .expect("write to string");
    }
    write_file(&dir.join(probe_csv_name(report)), &out)
}

/// One target across models: a row per layer, a `label:stream` column pair
/// (mean, std) per probed stream.
pub fn write_probe_table(path: &Path, reports: &[&ProbeReport]) -> Result<()> {
    let Some(first) = reports.first() else {
        return Err(Error::Invalid("no reports to tabulate".into()));
    };
    if reports.iter().any(|r| r.target != first.target) {
        return Err(Error::Invalid("a table holds one probe target".into()));
    }
    let mut cols: Vec<(&ProbeReport, Stream)> = Vec::new();
    for r in reports {
        let mut seen = Vec::new();
        for row in &r.rows {
            if !seen.contains(&row.stream) {
                seen.push(row.stream);
                cols.push((r, row.stream));
            }
        }
    }
    let mut out = String::from("layer");
    for (r, s) in &cols {
        write!(out, ",{0}:{1}_mean,{0}:{1}_std", r.label, s.name()).expect("write to string");
    }
    out.push('\n');
    let max_layer = reports.iter().flat_map(|r| r.layers()).max().unwrap_or(0);
    for layer in 0..=max_layer {
        out.push_str(&layer.to_string());
        for (r, s) in &cols {
            let c = r.cell(layer, *s);
            write!(out, ",{},{}", fmt_cell(c, |c| c.r2_mean), fmt_cell(c, |c| c.r2_std)).expect("write to string");
        }
        out.push('\n');
    }
    write_file(path, &out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScopeRow {
    pub layer: usize,
    pub stream: Stream,
    pub semantic_only: Option<f64>,
    pub full: Option<f64>,
}

/// Layer-by-layer R² of the same target under the two MLM head scopes.
pub fn compare_scopes(semantic_only: &ProbeReport, full: &ProbeReport) -> Result<Vec<ScopeRow>> {
    if semantic_only.target != full.target {
        return Err(Error::Invalid("scope comparison needs reports of the same target".into()));
    }
    Ok(semantic_only
        .rows
        .iter()
        .map(|r| ScopeRow {
            layer: r.layer,
            stream: r.stream,
            semantic_only: r.cell.as_ref().map(|c| c.r2_mean),
            full: full.cell(r.layer, r.stream).map(|c| c.r2_mean),
        })
        .collect())
}

pub fn write_scope_csv(path: &Path, rows: &[ScopeRow]) -> Result<()> {
    let mut out = String::from("layer,stream,r2_semantic_only,r2_full\n");
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), |v| v.to_string());
    for r in rows {
        writeln!(out, "{},{},{},{}", r.layer, r.stream.name(), opt(r.semantic_only), opt(r.full)).expect("write to string");
    }
    write_file(path, &out)
}

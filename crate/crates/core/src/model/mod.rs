// SPDX-License-Identifier: MIT OR Apache-2.0

//! The encoder: three-stream attention, split SwiGLU, per-stream RMSNorm
//! and the MLM head, for the disentangled model and its three baselines.

mod config;
mod params;

use std::sync::Arc;

pub use config::{MlmScope, ModelConfig, Variant};
pub use params::{BoundParams, Param, ParamStore};
use params::Init;

use crate::error::{Error, Result};
use crate::numerics::{Graph, Scalar, Tensor, Var};
use crate::positional::{bias_indices, rope_tables};
use crate::rng::{stream, Purpose};

/// One sequence as the encoder sees it.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub ids: &'a [usize],
    pub positions: &'a [usize],
    /// `[CLS]`/`[SEP]` flags.
    pub special: &'a [bool],
}

/// Hidden state handles. `ap` is `None` for models without an AP stream.
#[derive(Clone, Copy, Debug)]
pub struct StreamVars {
    pub ap: Option<Var>,
    pub sem: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub w_sem: Var,
    /// AP weights after the special-token indicator.
    pub w_ap: Option<Var>,
    pub bias: Option<Var>,
    pub logits: Var,
    pub probs: Var,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    /// After the attention residual.
    pub mid: StreamVars,
    /// After the feed-forward residual.
    pub post: StreamVars,
    pub heads: Vec<HeadVars>,
}

#[derive(Clone, Debug)]
pub struct EncoderTrace {
    pub embeddings: StreamVars,
    pub layers: Vec<LayerVars>,
}

impl EncoderTrace {
    pub fn final_state(&self) -> StreamVars {
        self.layers.last().map_or(self.embeddings, |l| l.post)
    }

    /// State `l`: 0 is the embedding output, `l ≥ 1` the output of block `l`.
    pub fn state(&self, l: usize) -> Option<StreamVars> {
        if l == 0 {
            Some(self.embeddings)
        } else {
            self.layers.get(l - 1).map(|x| x.post)
        }
    }
}

/// Optional hooks into the forward pass.
#[derive(Clone, Copy, Default)]
pub struct ForwardOptions<'a, T: Scalar> {
    /// Replaces `softmax(l)` by fixed probabilities, indexed `[layer][head]`.
    pub inject_probs: Option<&'a [Vec<Tensor<T>>]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamValues<T: Scalar = f32> {
    pub ap: Option<Tensor<T>>,
    pub sem: Tensor<T>,
}

impl<T: Scalar> StreamValues<T> {
    /// `[x_AP; x_sem]` per token.
    pub fn concat(&self) -> Tensor<T> {
        match &self.ap {
            None => self.sem.clone(),
            Some(ap) => {
                let (n, da) = (ap.rows(), ap.cols());
                let ds = self.sem.cols();
                let mut data = Vec::with_capacity(n * (da + ds));
                for i in 0..n {
                    data.extend_from_slice(ap.row(i));
                    data.extend_from_slice(self.sem.row(i));
                }
                Tensor::new(vec![n, da + ds], data).expect("concat shape")
            }
        }
    }
}

/// Which part of the hidden state to read.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Ap,
    Sem,
    /// `[x_AP; x_sem]`, the whole state.
    All,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Ap => "ap",
            Stream::Sem => "sem",
            Stream::All => "all",
        }
    }

    pub fn select<T: Scalar>(self, state: &StreamValues<T>) -> Option<Tensor<T>> {
        match self {
            Stream::Ap => state.ap.clone(),
            Stream::Sem => Some(state.sem.clone()),
            Stream::All => Some(state.concat()),
        }
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ap" => Ok(Stream::Ap),
            "sem" => Ok(Stream::Sem),
            "all" => Ok(Stream::All),
            other => Err(Error::Config(format!("unknown stream {other:?} (ap, sem, all)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HeadValues<T: Scalar = f32> {
    pub w_sem: Tensor<T>,
    pub w_ap: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
    pub logits: Tensor<T>,
    pub probs: Tensor<T>,
}

/// Plain values of a forward pass, for analysis.
#[derive(Clone, Debug)]
pub struct Inspection<T: Scalar = f32> {
    /// Index 0 is the embedding output, index `l` the output of block `l`.
    pub states: Vec<StreamValues<T>>,
    pub mid: Vec<StreamValues<T>>,
    pub heads: Vec<Vec<HeadValues<T>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn lname(l: usize, what: &str) -> String {
    format!("layers.{l}.{what}")
}

impl Model<f32> {
    /// Fresh model: N(0, init_std²) projections and embeddings, zero biases
    /// and relative-bias tables, unit norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let (da, ds, dm, v) = (c.d_ap, c.d_sem, c.d_model(), c.vocab_size);
        let std = c.init_std;
        let mut rng = stream(seed, Purpose::Init, 0);
        let mut p = ParamStore::new();
        p.init(&mut rng, "tok_emb", &[v, ds], Init::Normal(std), true)?;
        match c.variant {
            Variant::Dstg if da > 0 => p.init(&mut rng, "ap_emb", &[c.max_positions, da], Init::Normal(std), true)?,
            Variant::Ap => p.init(&mut rng, "pos_emb", &[c.max_positions, ds], Init::Normal(std), true)?,
            _ => {}
        }
        for l in 0..c.layers {
            p.init(&mut rng, lname(l, "attn_norm_sem"), &[ds], Init::Ones, false)?;
            if da > 0 {
                p.init(&mut rng, lname(l, "attn_norm_ap"), &[da], Init::Ones, false)?;
            }
            for w in ["wq_sem", "wk_sem"] {
                p.init(&mut rng, lname(l, w), &[ds, dm], Init::Normal(std), true)?;
            }
            for w in ["wv_sem", "wo_sem"] {
                p.init(&mut rng, lname(l, w), &[ds, ds], Init::Normal(std), true)?;
            }
            if da > 0 {
                for w in ["wq_ap", "wk_ap"] {
                    p.init(&mut rng, lname(l, w), &[da, dm], Init::Normal(std), true)?;
                }
                for w in ["wv_ap", "wo_ap"] {
                    p.init(&mut rng, lname(l, w), &[da, da], Init::Normal(std), true)?;
                }
            }
            if c.variant.has_rp_bias() {
                p.init(&mut rng, lname(l, "rp_bias"), &[c.heads, c.num_buckets + 3], Init::Zeros, false)?;
            }
            p.init(&mut rng, lname(l, "ffn_norm_sem"), &[ds], Init::Ones, false)?;
            if da > 0 {
                p.init(&mut rng, lname(l, "ffn_norm_ap"), &[da], Init::Ones, false)?;
            }
            let d_int = c.d_int_ap() + c.d_int_sem();
            p.init(&mut rng, lname(l, "w_gate"), &[dm, d_int], Init::Normal(std), true)?;
            p.init(&mut rng, lname(l, "w_up"), &[dm, d_int], Init::Normal(std), true)?;
            if da > 0 {
                p.init(&mut rng, lname(l, "w_down_ap"), &[c.d_int_ap(), da], Init::Normal(std), true)?;
            }
            p.init(&mut rng, lname(l, "w_down_sem"), &[c.d_int_sem(), ds], Init::Normal(std), true)?;
        }
        p.init(&mut rng, "head.norm_sem", &[ds], Init::Ones, false)?;
        let head_in = match c.mlm_scope {
            MlmScope::SemanticOnly => ds,
            MlmScope::Full => {
                if da > 0 {
                    p.init(&mut rng, "head.norm_ap", &[da], Init::Ones, false)?;
                }
                dm
            }
        };
        p.init(&mut rng, "head.w", &[head_in, v], Init::Normal(std), true)?;
        p.init(&mut rng, "head.b", &[v], Init::Zeros, false)?;
        Ok(Self { config, params: p })
    }
}

struct Ctx<'a, T: Scalar> {
    model: &'a Model<T>,
    bound: &'a BoundParams,
    n: usize,
    ap_mask: Option<Arc<Vec<T>>>,
    bias_idx: Vec<Arc<Vec<usize>>>,
    rope: Option<(Arc<Vec<T>>, Arc<Vec<T>>)>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.bound.var(&self.model.params, name)
    }
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    pub fn bind(&self, graph: &mut Graph<T>, requires_grad: bool) -> BoundParams {
        self.params.bind(graph, requires_grad)
    }

    fn check_input(&self, input: &EncoderInput<'_>) -> Result<()> {
        let n = input.ids.len();
        if n == 0 {
            return Err(Error::Invalid("empty input".into()));
        }
        if input.positions.len() != n || input.special.len() != n {
            return Err(Error::Shape(format!(
                "{n} ids, {} positions, {} special flags",
                input.positions.len(),
                input.special.len()
            )));
        }
        if n > self.config.max_positions {
            return Err(Error::Invalid(format!(
                "sequence of {n} exceeds the {} supported positions",
                self.config.max_positions
            )));
        }
        if let Some(&p) = input.positions.iter().find(|&&p| p >= self.config.max_positions) {
            return Err(Error::Invalid(format!("position id {p} outside [0, {})", self.config.max_positions)));
        }
        if let Some(&id) = input.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Invalid(format!("token id {id} outside vocabulary")));
        }
        Ok(())
    }

    /// Builds the encoder on `graph`. Every intermediate stays on the tape so
    /// callers can read or differentiate any of them.
    pub fn forward(
        &self,
        graph: &mut Graph<T>,
        bound: &BoundParams,
        input: &EncoderInput<'_>,
        opts: ForwardOptions<'_, T>,
    ) -> Result<EncoderTrace> {
        self.check_input(input)?;
        let c = &self.config;
        let n = input.ids.len();
        let ap_mask = c.has_ap_stream().then(|| {
            let mut m = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    m.push(if !input.special[i] && !input.special[j] { T::one() } else { T::zero() });
                }
            }
            Arc::new(m)
        });
        let bias_idx = if c.variant.has_rp_bias() {
            (0..c.heads)
                .map(|h| Arc::new(bias_indices(h, input.special, c.num_buckets, c.max_distance)))
                .collect()
        } else {
            Vec::new()
        };
        let rope = if c.variant == Variant::Rope {
            let (cos, sin) = rope_tables::<T>(input.positions, c.d_head(), c.rope_base)?;
            Some((Arc::new(cos), Arc::new(sin)))
        } else {
            None
        };
        let ctx = Ctx { model: self, bound, n, ap_mask, bias_idx, rope };

        let tok = graph.gather_rows(ctx.p("tok_emb")?, input.ids)?;
        let embeddings = match c.variant {
            Variant::Ap => {
                let pos = graph.gather_rows(ctx.p("pos_emb")?, input.positions)?;
                StreamVars { ap: None, sem: graph.add(tok, pos)? }
            }
            Variant::Dstg if c.has_ap_stream() => {
                let ap = graph.gather_rows(ctx.p("ap_emb")?, input.positions)?;
                StreamVars { ap: Some(ap), sem: tok }
            }
            _ => StreamVars { ap: None, sem: tok },
        };

        let eps = T::from_f64(c.norm_eps);
        let mut x = embeddings;
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let normed = self.norm_streams(graph, &ctx, x, &lname(l, "attn_norm_sem"), &lname(l, "attn_norm_ap"), eps)?;
            let injected = opts.inject_probs.map(|p| &p[l][..]);
            let (attn, heads) = self.attention(graph, &ctx, l, normed, injected)?;
            let mid = residual(graph, x, attn)?;
            let normed = self.norm_streams(graph, &ctx, mid, &lname(l, "ffn_norm_sem"), &lname(l, "ffn_norm_ap"), eps)?;
            let ffn = self.swiglu(graph, &ctx, l, normed)?;
            let post = residual(graph, mid, ffn)?;
            layers.push(LayerVars { mid, post, heads });
            x = post;
        }
        Ok(EncoderTrace { embeddings, layers })
    }

    fn norm_streams(
        &self,
        graph: &mut Graph<T>,
        ctx: &Ctx<'_, T>,
        x: StreamVars,
        sem_gain: &str,
        ap_gain: &str,
        eps: T,
    ) -> Result<StreamVars> {
        let sem = graph.rmsnorm(x.sem, ctx.p(sem_gain)?, eps)?;
        let ap = match x.ap {
            Some(ap) => Some(graph.rmsnorm(ap, ctx.p(ap_gain)?, eps)?),
            None => None,
        };
        Ok(StreamVars { ap, sem })
    }

    fn attention(
        &self,
        graph: &mut Graph<T>,
        ctx: &Ctx<'_, T>,
        l: usize,
        x: StreamVars,
        injected: Option<&[Tensor<T>]>,
    ) -> Result<(StreamVars, Vec<HeadVars>)> {
        let c = &self.config;
        let (dh, hs, ha) = (c.d_head(), c.d_sem / c.heads, c.d_ap / c.heads);
        let scale = T::one() / T::from_usize(dh).sqrt();

        let mut q_sem = graph.matmul(x.sem, ctx.p(&lname(l, "wq_sem"))?)?;
        let mut k_sem = graph.matmul(x.sem, ctx.p(&lname(l, "wk_sem"))?)?;
        if let Some((cos, sin)) = &ctx.rope {
            q_sem = graph.rope(q_sem, cos.clone(), sin.clone(), dh)?;
            k_sem = graph.rope(k_sem, cos.clone(), sin.clone(), dh)?;
        }
        let v_sem = graph.matmul(x.sem, ctx.p(&lname(l, "wv_sem"))?)?;
        let ap_proj = match x.ap {
            Some(ap) => Some((
                graph.matmul(ap, ctx.p(&lname(l, "wq_ap"))?)?,
                graph.matmul(ap, ctx.p(&lname(l, "wk_ap"))?)?,
                graph.matmul(ap, ctx.p(&lname(l, "wv_ap"))?)?,
            )),
            None => None,
        };
        let rp_table = if c.variant.has_rp_bias() { Some(ctx.p(&lname(l, "rp_bias"))?) } else { None };

        let mut heads = Vec::with_capacity(c.heads);
        let mut out_sem = Vec::with_capacity(c.heads);
        let mut out_ap = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let qh = graph.slice_cols(q_sem, h * dh, dh)?;
            let kh = graph.slice_cols(k_sem, h * dh, dh)?;
            let raw = graph.matmul_bt(qh, kh)?;
            let w_sem = graph.scale(raw, scale);
            let mut logits = w_sem;
            let mut w_ap = None;
            if let (Some((q, k, _)), Some(mask)) = (ap_proj, &ctx.ap_mask) {
                let qa = graph.slice_cols(q, h * dh, dh)?;
                let ka = graph.slice_cols(k, h * dh, dh)?;
                let raw = graph.matmul_bt(qa, ka)?;
                let scaled = graph.scale(raw, scale);
                let masked = graph.mul_const(scaled, mask.clone())?;
                logits = graph.add(logits, masked)?;
                w_ap = Some(masked);
            }
            let mut bias = None;
            if let Some(table) = rp_table {
                let b = graph.gather_elems(table, ctx.bias_idx[h].clone(), vec![ctx.n, ctx.n])?;
                logits = graph.add(logits, b)?;
                bias = Some(b);
            }
            let probs = match injected {
                Some(fixed) => {
                    if fixed[h].shape() != [ctx.n, ctx.n] {
                        return Err(Error::Shape(format!("injected attention for head {h} is {:?}", fixed[h].shape())));
                    }
                    graph.constant(fixed[h].clone())
                }
                None => graph.softmax_rows(logits, None)?,
            };
            let vh = graph.slice_cols(v_sem, h * hs, hs)?;
            out_sem.push(graph.matmul(probs, vh)?);
            if let Some((_, _, v)) = ap_proj {
                let vh = graph.slice_cols(v, h * ha, ha)?;
                out_ap.push(graph.matmul(probs, vh)?);
            }
            heads.push(HeadVars { w_sem, w_ap, bias, logits, probs });
        }
        let cat = graph.concat_cols(&out_sem)?;
        let sem = graph.matmul(cat, ctx.p(&lname(l, "wo_sem"))?)?;
        let ap = if out_ap.is_empty() {
            None
        } else {
            let cat = graph.concat_cols(&out_ap)?;
            Some(graph.matmul(cat, ctx.p(&lname(l, "wo_ap"))?)?)
        };
        Ok((StreamVars { ap, sem }, heads))
    }

    /// Gate and up projections read `[x_AP; x_sem]`; the intermediate is split
    /// back so each stream has its own down projection.
    fn swiglu(&self, graph: &mut Graph<T>, ctx: &Ctx<'_, T>, l: usize, x: StreamVars) -> Result<StreamVars> {
        let c = &self.config;
        let input = match x.ap {
            Some(ap) => graph.concat_cols(&[ap, x.sem])?,
            None => x.sem,
        };
        let gate = graph.matmul(input, ctx.p(&lname(l, "w_gate"))?)?;
        let up = graph.matmul(input, ctx.p(&lname(l, "w_up"))?)?;
        let act = graph.swish(gate);
        let hidden = graph.mul(act, up)?;
        match x.ap {
            Some(_) => {
                let h_ap = graph.slice_cols(hidden, 0, c.d_int_ap())?;
                let h_sem = graph.slice_cols(hidden, c.d_int_ap(), c.d_int_sem())?;
                Ok(StreamVars {
                    ap: Some(graph.matmul(h_ap, ctx.p(&lname(l, "w_down_ap"))?)?),
                    sem: graph.matmul(h_sem, ctx.p(&lname(l, "w_down_sem"))?)?,
                })
            }
            None => Ok(StreamVars { ap: None, sem: graph.matmul(hidden, ctx.p(&lname(l, "w_down_sem"))?)? }),
        }
    }

    /// Vocabulary logits for the given rows of the final state (all rows when
    /// `rows` is `None`). The semantic-only head never reads `x_AP`.
    pub fn mlm_logits(
        &self,
        graph: &mut Graph<T>,
        bound: &BoundParams,
        state: StreamVars,
        rows: Option<&[usize]>,
    ) -> Result<Var> {
        let p = |name: &str| bound.var(&self.params, name);
        let eps = T::from_f64(self.config.norm_eps);
        let pick = |graph: &mut Graph<T>, v: Var| match rows {
            Some(r) => graph.gather_rows(v, r),
            None => Ok(v),
        };
        let sem = pick(graph, state.sem)?;
        let sem = graph.rmsnorm(sem, p("head.norm_sem")?, eps)?;
        let features = match (self.config.mlm_scope, state.ap) {
            (MlmScope::Full, Some(ap)) => {
                let ap = pick(graph, ap)?;
                let ap = graph.rmsnorm(ap, p("head.norm_ap")?, eps)?;
                graph.concat_cols(&[ap, sem])?
            }
            _ => sem,
        };
        let logits = graph.matmul(features, p("head.w")?)?;
        graph.add_row(logits, p("head.b")?)
    }

    /// Runs the encoder without gradients and returns every intermediate value.
    pub fn inspect(&self, input: &EncoderInput<'_>) -> Result<Inspection<T>> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph, false);
        let trace = self.forward(&mut graph, &bound, input, ForwardOptions::default())?;
        let vals = |s: StreamVars| StreamValues {
            ap: s.ap.map(|v| graph.value(v).clone()),
            sem: graph.value(s.sem).clone(),
        };
        let mut states = vec![vals(trace.embeddings)];
        let mut mid = Vec::new();
        let mut heads = Vec::new();
        for layer in &trace.layers {
            states.push(vals(layer.post));
            mid.push(vals(layer.mid));
            heads.push(
                layer
                    .heads
                    .iter()
                    .map(|h| HeadValues {
                        w_sem: graph.value(h.w_sem).clone(),
                        w_ap: h.w_ap.map(|v| graph.value(v).clone()),
                        bias: h.bias.map(|v| graph.value(v).clone()),
                        logits: graph.value(h.logits).clone(),
                        probs: graph.value(h.probs).clone(),
                    })
                    .collect(),
            );
        }
        Ok(Inspection { states, mid, heads })
    }
}

fn residual<T: Scalar>(graph: &mut Graph<T>, x: StreamVars, delta: StreamVars) -> Result<StreamVars> {
    let sem = graph.add(x.sem, delta.sem)?;
    let ap = match (x.ap, delta.ap) {
        (Some(a), Some(d)) => Some(graph.add(a, d)?),
        (a, _) => a,
    };
    Ok(StreamVars { ap, sem })
}

#[cfg(test)]
mod tests;

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value and the information its
//! backward rule needs. Nodes are created in topological order, so the
//! backward pass is a single reverse sweep over the tape.

use std::sync::Arc;

use super::tensor::{
    matmul_acc, matmul_at_acc, matmul_bt_acc, sigmoid, softmax_row, Scalar, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Vec<T>>),
    Scale(Var, T),
    Swish(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Softmax(Var),
    CrossEntropy { logits: Var, labels: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    GatherElems { src: Var, idx: Arc<Vec<usize>> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Rope { x: Var, cos: Arc<Vec<T>>, sin: Arc<Vec<T>>, d_head: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recording tape for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

/// Accumulated gradients, indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, with an all-zero tensor standing in for "unreached".
    pub fn get_or_zeros(&self, v: Var) -> Tensor<T> {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. It participates in backward iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf, &[])
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?} x {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(shape_err("matmul_bt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a row vector to every row of a matrix. The only broadcast supported.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if self.value(row).numel() != n {
            return Err(shape_err("add_row", self.value(a).shape(), self.value(row).shape()));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = data[i * n + j] + r[j];
            }
        }
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, a: Var, c: Arc<Vec<T>>) -> Result<Var> {
        let va = self.value(a);
        if va.numel() != c.len() {
            return Err(Error::Shape(format!(
                "mul_const: {:?} vs {} constants",
                va.shape(),
                c.len()
            )));
        }
        let data = va.data().iter().zip(c.iter()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulConst(a, c), &[a]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn swish(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| x * sigmoid(x)).collect();
        let t = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        self.push(t, Op::Swish(a), &[a])
    }

    /// Row-wise RMS normalisation: `gain ⊗ x / sqrt(mean(x²) + eps)`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var> {
        let (m, d) = self.dims(x)?;
        if self.value(gain).numel() != d {
            return Err(shape_err("rmsnorm", self.value(x).shape(), self.value(gain).shape()));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let mut out = vec![T::zero(); m * d];
        let mut inv_rms = Vec::with_capacity(m);
        let inv_d = T::one() / T::from_usize(d.max(1));
        for i in 0..m {
            let row = &xs[i * d..(i + 1) * d];
            let ms = row.iter().fold(T::zero(), |s, &v| s + v * v) * inv_d;
            let r = T::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            for j in 0..d {
                out[i * d + j] = g[j] * row[j] * r;
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(t, Op::RmsNorm { x, gain, inv_rms }, &[x, gain]))
    }

    /// Row-wise softmax. Keys with `key_mask[j] == false` get probability 0.
    pub fn softmax_rows(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if key_mask.is_some_and(|k| k.len() != n) {
            return Err(Error::Shape(format!("key mask of {} for {n} keys", key_mask.map_or(0, |k| k.len()))));
        }
        let xs = self.value(x).data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            softmax_row(&xs[i * n..(i + 1) * n], key_mask, &mut out[i * n..(i + 1) * n])
                .ok_or_else(|| Error::Invalid(format!("softmax row {i} has every key masked")))?;
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Mean negative log-likelihood over rows whose label is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let (m, v) = self.dims(logits)?;
        if labels.len() != m {
            return Err(Error::Shape(format!("cross_entropy: {m} rows but {} labels", labels.len())));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![T::zero(); m * v];
        let mut total = T::zero();
        let mut count = 0usize;
        for (i, label) in labels.iter().enumerate() {
            let Some(y) = *label else { continue };
            if y >= v {
                return Err(Error::Invalid(format!("label {y} outside vocabulary of {v}")));
            }
            let row = &xs[i * v..(i + 1) * v];
            let max = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for (p, &z) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (z - max).exp();
                sum = sum + *p;
            }
            for p in probs[i * v..(i + 1) * v].iter_mut() {
                *p = *p / sum;
            }
            total = total + (max + sum.ln() - row[y]);
            count += 1;
        }
        if count == 0 {
            return Err(Error::Invalid("cross_entropy: no labelled positions".into()));
        }
        let loss = total / T::from_usize(count);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs, count },
            &[logits],
        ))
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (m, d) = self.dims(table)?;
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= m {
                return Err(Error::Invalid(format!("row {id} out of range for table of {m} rows")));
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(t, Op::GatherRows { table, ids: ids.to_vec() }, &[table]))
    }

    /// `out[i] = src.flat[idx[i]]`, shaped as `shape`.
    pub fn gather_elems(&mut self, src: Var, idx: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let s = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx.iter() {
            out.push(*s.get(i).ok_or_else(|| Error::Invalid(format!("gather index {i} out of range")))?);
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::GatherElems { src, idx }, &[src]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if start + len > n {
            return Err(Error::Shape(format!("slice {start}..{} of {n} columns", start + len)));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let t = Tensor::new(vec![m, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p)?;
            if r != m {
                return Err(shape_err("concat_cols", self.value(parts[0]).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rotates consecutive column pairs inside every `d_head`-wide block.
    /// `cos`/`sin` are `rows × d_head/2` tables.
    pub fn rope(&mut self, x: Var, cos: Arc<Vec<T>>, sin: Arc<Vec<T>>, d_head: usize) -> Result<Var> {
        let (m, n) = self.dims(x)?;
        if d_head % 2 != 0 || n % d_head != 0 || cos.len() != m * d_head / 2 {
            return Err(Error::Shape(format!("rope: {m}x{n} with head width {d_head}")));
        }
        let out = rotate(self.value(x).data(), &cos, &sin, m, n, d_head, false);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Rope { x, cos, sin, d_head }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(T::zero(), |a, &b| a + b);
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(idx, &g, &mut grads)?;
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.1;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| matmul_bt_acc(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_at_acc(av, g, gb, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.dims(*a)?;
                let n = self.dims(*b)?.0;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| matmul_acc(g, bv, ga, m, n, k));
                acc(*b, &mut |gb| matmul_at_acc(g, av, gb, m, n, k));
            }
            Op::Transpose(a) => {
                let (r, c) = self.dims(*a)?;
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] = ga[i * c + j] + g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::AddRow(a, r) => {
                let n = self.dims(*a)?.1;
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*r, &mut |gr| {
                    for (i, &v) in g.iter().enumerate() {
                        gr[i % n] = gr[i % n] + v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| fma_into(ga, g, bv));
                acc(*b, &mut |gb| fma_into(gb, g, av));
            }
            Op::MulConst(a, c) => acc(*a, &mut |ga| fma_into(ga, g, c)),
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                for (x, &v) in ga.iter_mut().zip(g) {
                    *x = *x + v * *s;
                }
            }),
            Op::Swish(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |ga| {
                    for ((x, &v), &z) in ga.iter_mut().zip(g).zip(av) {
                        let s = sigmoid(z);
                        *x = *x + v * s * (T::one() + z * (T::one() - s));
                    }
                });
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (m, d) = self.dims(*x)?;
                let xs = self.value(*x).data();
                let gv = self.value(*gain).data();
                let inv_d = T::one() / T::from_usize(d.max(1));
                acc(*gain, &mut |gg| {
                    for i in 0..m {
                        for j in 0..d {
                            gg[j] = gg[j] + g[i * d + j] * xs[i * d + j] * inv_rms[i];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        let r = inv_rms[i];
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot = dot + g[i * d + j] * gv[j] * xs[i * d + j] * r;
                        }
                        let coef = dot * inv_d;
                        for j in 0..d {
                            let u = xs[i * d + j] * r;
                            gx[i * d + j] = gx[i * d + j] + r * (g[i * d + j] * gv[j] - u * coef);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let (m, n) = self.dims(*x)?;
                let y = node.value.data();
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        let row = i * n..(i + 1) * n;
                        let dot = y[row.clone()].iter().zip(&g[row.clone()]).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for j in row {
                            gx[j] = gx[j] + y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs, count } => {
                let v = self.dims(*logits)?.1;
                let scale = g[0] / T::from_usize(*count);
                acc(*logits, &mut |gl| {
                    for (i, label) in labels.iter().enumerate() {
                        let Some(y) = *label else { continue };
                        for j in 0..v {
                            gl[i * v + j] = gl[i * v + j] + probs[i * v + j] * scale;
                        }
                        gl[i * v + y] = gl[i * v + y] - scale;
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let d = self.dims(*table)?.1;
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] = gt[id * d + j] + g[r * d + j];
                        }
                    }
                });
            }
            Op::GatherElems { src, idx } => acc(*src, &mut |gs| {
                for (&i, &v) in idx.iter().zip(g) {
                    gs[i] = gs[i] + v;
                }
            }),
            Op::SliceCols { x, start } => {
                let (m, n) = self.dims(*x)?;
                let len = node.value.cols();
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        for j in 0..len {
                            gx[i * n + start + j] = gx[i * n + start + j] + g[i * len + j];
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.dims(p)?.1;
                    acc(p, &mut |gp| {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] = gp[i * w + j] + g[i * n + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Rope { x, cos, sin, d_head } => {
                let (m, n) = self.dims(*x)?;
                let back = rotate(g, cos, sin, m, n, *d_head, true);
                acc(*x, &mut |gx| add_into(gx, &back));
            }
            Op::Sum(x) => acc(*x, &mut |gx| {
                for v in gx.iter_mut() {
                    *v = *v + g[0];
                }
            }),
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn fma_into<T: Scalar>(dst: &mut [T], a: &[T], b: &[T]) {
    for ((d, &x), &y) in dst.iter_mut().zip(a).zip(b) {
        *d = *d + x * y;
    }
}

fn rotate<T: Scalar>(
    x: &[T],
    cos: &[T],
    sin: &[T],
    m: usize,
    n: usize,
    d_head: usize,
    inverse: bool,
) -> Vec<T> {
    let half = d_head / 2;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for h in 0..n / d_head {
            for p in 0..half {
                let (c, mut s) = (cos[i * half + p], sin[i * half + p]);
                if inverse {
                    s = -s;
                }
                let a = i * n + h * d_head + 2 * p;
                let (x0, x1) = (x[a], x[a + 1]);
                out[a] = x0 * c - x1 * s;
                out[a + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}

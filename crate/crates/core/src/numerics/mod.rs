// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense tensors and reverse-mode differentiation.

mod graph;
pub mod gradcheck;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::{matmul, sigmoid, softmax_row, swish_scalar, Scalar, Tensor};

use crate::error::{Error, Result};

/// Row-wise softmax of a matrix under a key mask, outside of any graph.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>, key_mask: Option<&[bool]>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let y = g.softmax_rows(x, key_mask)?;
    Ok(g.value(y).clone())
}

/// RMS normalisation of a single vector.
pub fn rmsnorm<T: Scalar>(x: &[T], gain: &[T], eps: T) -> Result<Vec<T>> {
    if x.len() != gain.len() || x.is_empty() {
        return Err(Error::Shape(format!("rmsnorm of {} values with {} gains", x.len(), gain.len())));
    }
    let mut g = Graph::new();
    let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let gv = g.constant(Tensor::new(vec![x.len()], gain.to_vec())?);
    let y = g.rmsnorm(xv, gv, eps)?;
    Ok(g.value(y).data().to_vec())
}

/// Mean cross-entropy of `logits` (n×V) against optional labels.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[Option<usize>]) -> Result<T> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let l = g.cross_entropy(x, labels)?;
    Ok(g.value(l).item())
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Positional machinery: T5 relative buckets, the relative-position bias with
//! its special-token scalars, rotary embeddings, and absolute-position
//! lookup with random shifting.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

pub const DEFAULT_NUM_BUCKETS: usize = 32;
pub const DEFAULT_MAX_DISTANCE: usize = 128;
pub const ROPE_BASE: f64 = 10_000.0;

/// Bidirectional T5 bucket of a signed offset `rel = i − j` (query minus key).
///
/// Half of the buckets serve each sign. Inside a half, the first
/// `half / 2` offsets get one bucket each, larger offsets share buckets whose
/// width grows logarithmically up to `max_distance`, and everything beyond
/// lands in the half's last bucket.
pub fn t5_bucket(rel: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let mut bucket = if rel < 0 { half } else { 0 };
    let n = rel.unsigned_abs() as usize;
    let max_exact = half / 2;
    if n < max_exact {
        return bucket + n;
    }
    let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (ratio * (half - max_exact) as f64) as usize;
    bucket += large.min(half - 1);
    bucket
}

/// Learned relative-position bias of one layer.
///
/// Row `h` holds `num_buckets` bucket biases followed by three
/// distance-independent scalars: both tokens special, key special, query
/// special.
#[derive(Clone, Debug)]
pub struct RpBiasTable<T: Scalar = f32> {
    pub values: Tensor<T>,
    pub num_buckets: usize,
    pub max_distance: usize,
}

/// Column of the both-special scalar within a head's row.
pub fn col_both_special(num_buckets: usize) -> usize {
    num_buckets
}

pub fn col_key_special(num_buckets: usize) -> usize {
    num_buckets + 1
}

pub fn col_query_special(num_buckets: usize) -> usize {
    num_buckets + 2
}

impl<T: Scalar> RpBiasTable<T> {
    pub fn zeros(heads: usize, num_buckets: usize, max_distance: usize) -> Self {
        Self { values: Tensor::zeros(&[heads, num_buckets + 3]), num_buckets, max_distance }
    }

    pub fn heads(&self) -> usize {
        self.values.rows()
    }

    pub fn row_width(&self) -> usize {
        self.num_buckets + 3
    }
}

/// Column selected by the four-case rule for query `i` and key `j`.
pub fn bias_column(i: usize, j: usize, special: &[bool], num_buckets: usize, max_distance: usize) -> usize {
    match (special[i], special[j]) {
        (true, true) => col_both_special(num_buckets),
        (_, true) => col_key_special(num_buckets),
        (true, _) => col_query_special(num_buckets),
        _ => t5_bucket(i as i64 - j as i64, num_buckets, max_distance),
    }
}

/// Flat indices into a `heads × (num_buckets + 3)` table so that gathering
/// yields head `h`'s `n × n` bias matrix.
pub fn bias_indices(head: usize, special: &[bool], num_buckets: usize, max_distance: usize) -> Vec<usize> {
    let n = special.len();
    let width = num_buckets + 3;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            idx.push(head * width + bias_column(i, j, special, num_buckets, max_distance));
        }
    }
    idx
}

/// Head `h`'s bias matrix for a sequence with the given special flags.
pub fn rp_bias_matrix<T: Scalar>(special: &[bool], head: usize, table: &RpBiasTable<T>) -> Result<Tensor<T>> {
    if head >= table.heads() {
        return Err(Error::Invalid(format!("head {head} of {}", table.heads())));
    }
    let n = special.len();
    let data = bias_indices(head, special, table.num_buckets, table.max_distance)
        .into_iter()
        .map(|k| table.values.data()[k])
        .collect();
    Tensor::new(vec![n, n], data)
}

/// `cos` and `sin` tables of shape `n × d_head/2` for the given positions.
pub fn rope_tables<T: Scalar>(positions: &[usize], d_head: usize, base: f64) -> Result<(Vec<T>, Vec<T>)> {
    if d_head % 2 != 0 {
        return Err(Error::Invalid(format!("rotary embedding needs an even head width, got {d_head}")));
    }
    let half = d_head / 2;
    let mut cos = Vec::with_capacity(positions.len() * half);
    let mut sin = Vec::with_capacity(positions.len() * half);
    for &p in positions {
        for k in 0..half {
            let freq = base.powf(-(2.0 * k as f64) / d_head as f64);
            let angle = p as f64 * freq;
            cos.push(T::from_f64(angle.cos()));
            sin.push(T::from_f64(angle.sin()));
        }
    }
    Ok((cos, sin))
}

/// Rotates each row of an `n × d_head` matrix by its position.
pub fn apply_rope<T: Scalar>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    let (n, d) = x.dims2()?;
    if positions.len() != n {
        return Err(Error::Shape(format!("{n} rows but {} positions", positions.len())));
    }
    let (cos, sin) = rope_tables::<T>(positions, d, base)?;
    let half = d / 2;
    let mut out = x.data().to_vec();
    for i in 0..n {
        for k in 0..half {
            let (c, s) = (cos[i * half + k], sin[i * half + k]);
            let a = i * d + 2 * k;
            let (x0, x1) = (x.data()[a], x.data()[a + 1]);
            out[a] = x0 * c - x1 * s;
            out[a + 1] = x0 * s + x1 * c;
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Absolute position ids of a sequence after shifting by `shift`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Positions {
    pub ids: Vec<usize>,
    pub shift: usize,
}

impl Positions {
    pub fn new(n: usize, shift: usize, max_positions: usize) -> Result<Self> {
        if n + shift > max_positions {
            return Err(Error::Invalid(format!(
                "{n} tokens shifted by {shift} exceed {max_positions} positions"
            )));
        }
        Ok(Self { ids: (shift..shift + n).collect(), shift })
    }

    /// The unshifted evaluation assignment.
    pub fn unshifted(n: usize) -> Self {
        Self { ids: (0..n).collect(), shift: 0 }
    }
}

/// Uniform shift `k` on `[0, m − n]`.
pub fn sample_ap_shift<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<usize> {
    if n > m {
        return Err(Error::Invalid(format!("{n} tokens do not fit {m} positions")));
    }
    Ok(rng.random_range(0..=m - n))
}

/// Gathers rows of an `m × d` absolute-position table.
pub fn ap_lookup<T: Scalar>(table: &Tensor<T>, positions: &[usize]) -> Result<Tensor<T>> {
    let (m, d) = table.dims2()?;
    let mut out = Vec::with_capacity(positions.len() * d);
    for &p in positions {
        if p >= m {
            return Err(Error::Invalid(format!("position {p} outside table of {m}")));
        }
        out.extend_from_slice(table.row(p));
    }
    Tensor::new(vec![positions.len(), d], out)
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Seeded random streams.
//!
//! Every random decision draws from a ChaCha8 stream addressed by
//! `(seed, purpose, index)`. Streams never share state, so a run can resume
//! from any step by knowing only the seed and the step counter.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Batch = 2,
    Shift = 3,
    Mask = 4,
    ProbeSplit = 5,
    Analysis = 6,
}

/// Bits of the ChaCha stream id left for the index.
const INDEX_BITS: u32 = 56;

/// Independent stream for `(seed, purpose, index)`; `index` must stay below 2^56.
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    debug_assert!(index < 1 << INDEX_BITS);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((purpose as u64) << INDEX_BITS) | index);
    rng
}

/// Index for per-document draws inside a step.
pub fn step_doc_index(step: u64, doc: usize) -> u64 {
    (step << 20) | doc as u64
}

// SPDX-License-Identifier: MIT OR Apache-2.0

//! Disentangled transformer encoder with separate absolute-position and
//! semantic streams, its entangled baselines, a deterministic MLM training
//! loop, and tools for inspecting what the trained streams encode.

pub mod analysis;
pub mod corpus;
pub mod error;
pub mod model;
pub mod numerics;
pub mod positional;
pub mod probes;
pub mod rng;
pub mod training;

pub use error::{Error, Result};

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::positional::{DEFAULT_MAX_DISTANCE, DEFAULT_NUM_BUCKETS, ROPE_BASE};

/// Which positional scheme the encoder uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Separate AP and semantic streams plus the relative bias.
    Dstg,
    /// Learned absolute embedding added to the token embedding.
    Ap,
    /// Relative bias only.
    Rp,
    /// Rotary queries and keys.
    Rope,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Dstg, Variant::Ap, Variant::Rp, Variant::Rope];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dstg => "dstg",
            Variant::Ap => "ap",
            Variant::Rp => "rp",
            Variant::Rope => "rope",
        }
    }

    pub fn has_rp_bias(self) -> bool {
        matches!(self, Variant::Dstg | Variant::Rp)
    }

    /// Variants with a learned absolute table, i.e. the ones position shifting affects.
    pub fn has_ap_table(self) -> bool {
        matches!(self, Variant::Dstg | Variant::Ap)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dstg" => Ok(Variant::Dstg),
            "ap" => Ok(Variant::Ap),
            "rp" => Ok(Variant::Rp),
            "rope" => Ok(Variant::Rope),
            other => Err(Error::Config(format!("unknown variant {other:?} (dstg, ap, rp, rope)"))),
        }
    }
}

/// Which part of the final hidden state feeds the MLM head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlmScope {
    SemanticOnly,
    Full,
}

impl MlmScope {
    pub fn name(self) -> &'static str {
        match self {
            MlmScope::SemanticOnly => "semantic_only",
            MlmScope::Full => "full",
        }
    }
}

impl FromStr for MlmScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic_only" | "semantic" => Ok(MlmScope::SemanticOnly),
            "full" => Ok(MlmScope::Full),
            other => Err(Error::Config(format!("unknown mlm scope {other:?} (semantic_only, full)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub mlm_scope: MlmScope,
    pub layers: usize,
    pub heads: usize,
    pub d_ap: usize,
    pub d_sem: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
    pub num_buckets: usize,
    pub max_distance: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
    pub init_std: f64,
}

impl ModelConfig {
    /// Desk-scale defaults. Baselines drop the AP stream and keep
    /// `d_model = d_sem`.
    pub fn desk(variant: Variant, vocab_size: usize) -> Self {
        Self {
            variant,
            mlm_scope: MlmScope::SemanticOnly,
            layers: 2,
            heads: 4,
            d_ap: if variant == Variant::Dstg { 8 } else { 0 },
            d_sem: 56,
            max_positions: 128,
            vocab_size,
            num_buckets: DEFAULT_NUM_BUCKETS,
            max_distance: DEFAULT_MAX_DISTANCE,
            rope_base: ROPE_BASE,
            norm_eps: 1e-6,
            init_std: 0.02,
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_ap + self.d_sem
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn d_int_ap(&self) -> usize {
        4 * self.d_ap
    }

    pub fn d_int_sem(&self) -> usize {
        4 * self.d_sem
    }

    pub fn has_ap_stream(&self) -> bool {
        self.d_ap > 0
    }

    /// Label used in file names: the variant, plus `-full` for the full-scope head.
    pub fn label(&self) -> String {
        match self.mlm_scope {
            MlmScope::SemanticOnly => self.variant.name().to_string(),
            MlmScope::Full => format!("{}-full", self.variant.name()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_sem == 0 || self.vocab_size == 0 || self.max_positions == 0 {
            return fail("heads, d_sem, vocab_size and max_positions must be positive".into());
        }
        if self.d_ap % self.heads != 0 || self.d_sem % self.heads != 0 {
            return fail(format!(
                "d_ap ({}) and d_sem ({}) must be multiples of heads ({})",
                self.d_ap, self.d_sem, self.heads
            ));
        }
        if self.variant != Variant::Dstg && self.d_ap != 0 {
            return fail(format!("variant {} has no AP stream; set d_ap = 0", self.variant));
        }
        if self.variant == Variant::Rope && self.d_head() % 2 != 0 {
            return fail(format!("rope needs an even head width, got {}", self.d_head()));
        }
        if self.variant.has_rp_bias() && (self.num_buckets < 4 || self.num_buckets % 2 != 0) {
            return fail(format!("num_buckets must be even and >= 4, got {}", self.num_buckets));
        }
        if self.variant.has_rp_bias() && self.max_distance <= self.num_buckets / 4 {
            return fail("max_distance must exceed the exact-bucket range".into());
        }
        if !(self.norm_eps > 0.0) || !(self.init_std >= 0.0) {
            return fail("norm_eps must be positive and init_std non-negative".into());
        }
        Ok(())
    }

    /// Closed-form parameter count for this configuration.
    pub fn parameter_count(&self) -> usize {
        let (da, ds, dm, v, m) = (self.d_ap, self.d_sem, self.d_model(), self.vocab_size, self.max_positions);
        let embed = v * ds
            + match self.variant {
                Variant::Dstg => m * da,
                Variant::Ap => m * ds,
                _ => 0,
            };
        let norms = 2 * (da + ds);
        let qk = 2 * (ds + da) * dm;
        let vo = 2 * (ds * ds + da * da);
        let rp = if self.variant.has_rp_bias() { self.heads * (self.num_buckets + 3) } else { 0 };
        let ffn = 2 * dm * 4 * dm + 4 * da * da + 4 * ds * ds;
        let per_layer = norms + qk + vo + rp + ffn;
        let head = match self.mlm_scope {
            MlmScope::SemanticOnly => ds + ds * v + v,
            MlmScope::Full => da + ds + dm * v + v,
        };
        embed + self.layers * per_layer + head
    }
}

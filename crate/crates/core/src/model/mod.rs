//! The dual-path decoder.
//!
//! The context path embeds text tokens and projected image tokens into one
//! causal sequence. The memory path projects the same image features a second
//! time into a [`MemoryBank`] that gated cross-attention mixin layers read
//! from. A mixin layer follows block 0 and every `mixin_every`-th block after
//! it.

mod decode;
mod forward;
mod layers;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::pos_encoding::RopeConfig;
use crate::seqplan::ImageDetail;

pub use decode::{argmax, decode, DecodeSession, Sampling};
pub use forward::{
    backward, build_cross_mask, forward, forward_with_bank, mixin_forward, CrossMask, ForwardPass, Gradients,
    MemoryBank,
};
pub use params::{Attention, Block, Ffw, GateState, Linear, Mixin, ModelParams, ParamGroup, TensorMeta};

/// Which path receives the tiles; the other path sees only the thumbnail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AllocationMode {
    /// Tiles go to the context path only.
    #[serde(rename = "dhr-s")]
    DhrS,
    /// Tiles go to the memory path only.
    #[serde(rename = "dhr-x")]
    DhrX,
    /// Both paths receive tiles.
    #[serde(rename = "dhr-b")]
    DhrB,
}

impl AllocationMode {
    /// `(context_detail, memory_detail)`.
    pub fn details(self) -> (ImageDetail, ImageDetail) {
        match self {
            Self::DhrS => (ImageDetail::Full, ImageDetail::Thumbnail),
            Self::DhrX => (ImageDetail::Thumbnail, ImageDetail::Full),
            Self::DhrB => (ImageDetail::Full, ImageDetail::Full),
        }
    }
}

impl FromStr for AllocationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dhr-s" | "dhr_s" | "s" => Ok(Self::DhrS),
            "dhr-x" | "dhr_x" | "x" => Ok(Self::DhrX),
            "dhr-b" | "dhr_b" | "b" => Ok(Self::DhrB),
            other => arg_err(format!("unknown allocation mode `{other}` (dhr-s, dhr-x, dhr-b)")),
        }
    }
}

impl fmt::Display for AllocationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DhrS => "dhr-s",
            Self::DhrX => "dhr-x",
            Self::DhrB => "dhr-b",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mixin_every: usize,
    pub vocab_size: usize,
    /// Channel dim of post-shuffle image tokens.
    pub d_vit: usize,
    pub rope_theta: f64,
    pub ffw_mult: usize,
    pub context_detail: ImageDetail,
    pub memory_detail: ImageDetail,
    /// When false the mixin layers are skipped: a plain interleaved decoder.
    pub memory_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 8,
            mixin_every: 4,
            vocab_size: 64,
            d_vit: 32,
            rope_theta: crate::pos_encoding::DEFAULT_THETA_BASE,
            ffw_mult: 4,
            context_detail: ImageDetail::Full,
            memory_detail: ImageDetail::Full,
            memory_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return arg_err(format!(
                "d_model ({}) must be a positive multiple of n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if !self.head_dim().is_multiple_of(2) {
            return arg_err("head dim must be even for rotary embedding");
        }
        if self.n_layers == 0 || self.mixin_every == 0 {
            return arg_err("n_layers and mixin_every must be >= 1");
        }
        if self.vocab_size < 2 || self.d_vit == 0 || self.ffw_mult == 0 {
            return arg_err("vocab_size >= 2, d_vit >= 1 and ffw_mult >= 1 are required");
        }
        RopeConfig::new(self.head_dim(), self.rope_theta)?;
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffw_hidden(&self) -> usize {
        self.d_model * self.ffw_mult
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig::new(self.head_dim(), self.rope_theta).expect("validated config")
    }

    pub fn n_mixins(&self) -> usize {
        self.n_layers.div_ceil(self.mixin_every)
    }

    /// Mixin layer that follows block `block`, if any.
    pub fn mixin_after(&self, block: usize) -> Option<usize> {
        block
            .is_multiple_of(self.mixin_every)
            .then_some(block / self.mixin_every)
    }

    pub fn with_allocation(mut self, mode: AllocationMode) -> Self {
        (self.context_detail, self.memory_detail) = mode.details();
        self
    }

    /// Named tensors in a checkpoint for this config.
    pub fn tensor_count(&self) -> usize {
        // embed, projector (w, b), final_norm, head
        // block: 2 norms + 4 attention + 4 ffw ; mixin: same + 2 gates
        5 + 10 * self.n_layers + 12 * self.n_mixins()
    }
}

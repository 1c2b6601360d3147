//! Two-way transformer mask decoder and the sixteen-slice high-resolution head.

mod base;
mod hr;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use base::{BaseDecoder, BaseOutput, TokenAttention, TwoWayLayer};
pub use hr::{feature_unensemble, pixel_ensemble, produce_slices, HrHead, HrOutput, SLICES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderMode {
    Base,
    #[default]
    Hr,
}

impl fmt::Display for DecoderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderMode::Base => "base",
            DecoderMode::Hr => "hr",
        })
    }
}

impl FromStr for DecoderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(DecoderMode::Base),
            "hr" => Ok(DecoderMode::Hr),
            other => Err(Error::Config(format!("unknown decoder mode {other:?} (expected base or hr)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub mode: DecoderMode,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            mode: DecoderMode::Hr,
            layers: 2,
            embed_dim: 64,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl DecoderConfig {
    /// Channel width of the upscaled mask features.
    pub fn mask_channels(&self) -> usize {
        self.embed_dim / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "decoder.embed_dim {} must be a positive multiple of 4",
                self.embed_dim
            )));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder.embed_dim {} is not divisible by decoder.heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("decoder.layers and decoder.mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Intermediate values of one decoder pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderState {
    /// `C' x 4g x 4g` upscaled mask features of the frozen decoder.
    pub f_mask: crate::tensor::Var,
    /// `16 x Cd` slice tokens after attention (high-resolution mode only).
    pub slice_tokens: Option<crate::tensor::Var>,
    /// `16 x C' x 4g x 4g` slice features.
    pub f_slice: Option<crate::tensor::Var>,
    /// `16 x 1 x 4g x 4g` slice outputs.
    pub s_slice: Option<crate::tensor::Var>,
    /// `1 x H x W` logits at native resolution.
    pub logits: crate::tensor::Var,
}

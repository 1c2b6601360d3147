//! Frozen transformer encoder with residual adapters, and the coarse prompt head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Conv2d, Graph, LayerNorm, Linear, Mlp, ParamBuilder};
use crate::scalar::Scalar;
use crate::tensor::{Padding, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub adapter_hidden: usize,
    pub heads: usize,
    /// Hidden width of each block's MLP as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub freeze_base: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 4,
            layers: 4,
            embed_dim: 64,
            adapter_hidden: 16,
            heads: 4,
            mlp_ratio: 2,
            freeze_base: true,
        }
    }
}

impl EncoderConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "model.image_size {} is not divisible by model.patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.grid() == 0 || self.grid() % 4 != 0 {
            return bad(format!("feature grid {} must be a positive multiple of 4", self.grid()));
        }
        if self.layers == 0 || self.embed_dim == 0 || self.adapter_hidden == 0 || self.mlp_ratio == 0 {
            return bad("model.layers, embed_dim, adapter_hidden and mlp_ratio must be positive".into());
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!("model.embed_dim {} is not divisible by model.heads {}", self.embed_dim, self.heads));
        }
        Ok(())
    }
}

/// Pre-norm transformer block: attention then MLP, both residual.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl Block {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, width: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            norm1: LayerNorm::new(&mut b.sub("norm1"), width),
            attn: Attention::new(&mut b.sub("attn"), width, heads),
            norm2: LayerNorm::new(&mut b.sub("norm2"), width),
            mlp: Mlp::new(&mut b.sub("mlp"), &[width, width * mlp_ratio, width]),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(g, x)?;
        let a = self.attn.forward(g, h, h, h)?;
        let x = g.add(x, a)?;
        let h = self.norm2.forward(g, x)?;
        let m = self.mlp.forward(g, h)?;
        g.add(x, m)
    }
}

/// Bottleneck `x + W2 relu(W1 x)`; `W2` starts at zero so the adapter is
/// initially the identity.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, width: usize, hidden: usize) -> Self {
        Self {
            down: Linear::new(&mut b.sub("down"), width, hidden),
            up: Linear::zero_init(&mut b.sub("up"), hidden, width),
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, x: Var) -> Result<Var> {
        let h = self.down.forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.up.forward(g, h)?;
        g.add(x, h)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `g² x C` token matrix.
    pub tokens: Var,
    /// `C x g x g` feature map.
    pub map: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub patch_embed: Linear,
    pub pos_embed: crate::nn::ParamId,
    pub blocks: Vec<Block>,
    pub adapters: Vec<Adapter>,
}

impl Encoder {
    /// Base weights go under `encoder.*` with the builder's trainability;
    /// adapters always under `adapter.*`, trainable.
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let c = config.embed_dim;
        let p = config.patch_size;
        let g = config.grid();
        let mut base = b.with_trainable("encoder", !config.freeze_base);
        let patch_embed = Linear::new(&mut base.sub("patch_embed"), 3 * p * p, c);
        let pos_embed = base.normal("pos_embed", &[g * g, c], 0.02);
        let blocks = (0..config.layers)
            .map(|i| Block::new(&mut base.sub(&format!("block{i}")), c, config.heads, config.mlp_ratio))
            .collect();
        let mut ad = b.with_trainable("adapter", true);
        let adapters = (0..config.layers)
            .map(|i| Adapter::new(&mut ad.sub(&format!("layer{i}")), c, config.adapter_hidden))
            .collect();
        Ok(Self {
            config: config.clone(),
            patch_embed,
            pos_embed,
            blocks,
            adapters,
        })
    }

    /// `[3, H, W]` image in `[0, 1]` to tokens and feature map.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, image: Var) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let want = [3, cfg.image_size, cfg.image_size];
        if g.shape(image) != want {
            return Err(Error::shape("encode", g.shape(image), &want));
        }
        let (p, n) = (cfg.patch_size, cfg.grid());
        let patches = g.space_to_depth(image, p)?;
        let patches = g.reshape(patches, [3 * p * p, n * n])?;
        let patches = g.transpose(patches)?;
        let mut x = self.patch_embed.forward(g, patches)?;
        let pos = g.param(self.pos_embed)?;
        x = g.add(x, pos)?;
        for (block, adapter) in self.blocks.iter().zip(&self.adapters) {
            x = block.forward(g, x)?;
            x = adapter.forward(g, x)?;
        }
        let map = g.transpose(x)?;
        let map = g.reshape(map, [cfg.embed_dim, n, n])?;
        Ok(EncoderOutput { tokens: x, map })
    }

    /// Global average pool of the tokens, shape `1 x C`.
    pub fn pooled<S: Scalar>(&self, g: &mut Graph<'_, S>, out: &EncoderOutput) -> Result<Var> {
        let m = g.mean_axis(out.tokens, 0)?;
        g.reshape(m, [1, self.config.embed_dim])
    }
}

/// Coarse foreground head: two 3x3 conv+ReLU, a 1x1 conv to 16 channels and
/// a factor-4 depth-to-space, giving a `1 x 4g x 4g` probability map.
#[derive(Clone, Debug)]
pub struct SpGen {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub head: Conv2d,
    pub input: usize,
}

pub const SPGEN_HIDDEN: usize = 16;

impl SpGen {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, input: usize) -> Self {
        let mut head = Conv2d::new(&mut b.sub("head"), SPGEN_HIDDEN, 16, 1);
        head.padding = Padding::Valid;
        Self {
            conv1: Conv2d::new(&mut b.sub("conv1"), input, SPGEN_HIDDEN, 3),
            conv2: Conv2d::new(&mut b.sub("conv2"), SPGEN_HIDDEN, SPGEN_HIDDEN, 3),
            head,
            input,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, features: Var) -> Result<Var> {
        let shape = g.shape(features);
        if shape.len() != 3 || shape[0] != self.input {
            return Err(Error::shape("spgen", shape, &[self.input, 0, 0]));
        }
        let h = self.conv1.forward(g, features)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.head.forward(g, h)?;
        let h = g.depth_to_space(h, 4)?;
        g.sigmoid(h)
    }
}

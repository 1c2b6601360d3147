use crate::error::{Error, Result};
use crate::nn::{Attention, ConvTranspose2x2, Graph, LayerNorm, Linear, Mlp, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::Var;

use super::DecoderConfig;

/// Token self-attention, token-to-image attention, token MLP and
/// image-to-token attention, each pre-norm and residual.
#[derive(Clone, Debug)]
pub struct TwoWayLayer {
    pub norm_self: LayerNorm,
    pub self_attn: Attention,
    pub norm_t2i: LayerNorm,
    pub token_to_image: Attention,
    pub norm_mlp: LayerNorm,
    pub mlp: Mlp,
    pub norm_i2t: LayerNorm,
    pub image_to_token: Attention,
}

/// Raw attention nodes whose saved probabilities have token queries.
#[derive(Clone, Debug, Default)]
pub struct TokenAttention {
    pub self_attn: Vec<Var>,
    pub token_to_image: Vec<Var>,
}

impl TwoWayLayer {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, width: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            norm_self: LayerNorm::new(&mut b.sub("norm_self"), width),
            self_attn: Attention::new(&mut b.sub("self_attn"), width, heads),
            norm_t2i: LayerNorm::new(&mut b.sub("norm_t2i"), width),
            token_to_image: Attention::new(&mut b.sub("t2i"), width, heads),
            norm_mlp: LayerNorm::new(&mut b.sub("norm_mlp"), width),
            mlp: Mlp::new(&mut b.sub("mlp"), &[width, width * mlp_ratio, width]),
            norm_i2t: LayerNorm::new(&mut b.sub("norm_i2t"), width),
            image_to_token: Attention::new(&mut b.sub("i2t"), width, heads),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        tokens: Var,
        image: Var,
        pe: Var,
        trace: &mut TokenAttention,
    ) -> Result<(Var, Var)> {
        let h = self.norm_self.forward(g, tokens)?;
        let (a, raw) = self.self_attn.forward_traced(g, h, h, h)?;
        trace.self_attn.push(raw);
        let t = g.add(tokens, a)?;

        let h = self.norm_t2i.forward(g, t)?;
        let keys = g.add(image, pe)?;
        let (a, raw) = self.token_to_image.forward_traced(g, h, keys, image)?;
        trace.token_to_image.push(raw);
        let t = g.add(t, a)?;

        let h = self.norm_mlp.forward(g, t)?;
        let m = self.mlp.forward(g, h)?;
        let t = g.add(t, m)?;

        let hi = self.norm_i2t.forward(g, image)?;
        let q = g.add(hi, pe)?;
        let a = self.image_to_token.forward(g, q, t, t)?;
        let image = g.add(image, a)?;
        Ok((t, image))
    }
}

#[derive(Clone, Debug)]
pub struct BaseOutput {
    /// Every token row after the final attention: output, prompt, then extras.
    pub tokens: Var,
    /// `C' x 4g x 4g`
    pub f_mask: Var,
    /// `1 x 4g x 4g` logits from the output-token hypernetwork.
    pub logits: Var,
    pub attention: TokenAttention,
}

/// The frozen mask decoder: projection neck, two-way transformer, two
/// transposed-conv upscaling steps and the output-token hypernetwork.
#[derive(Clone, Debug)]
pub struct BaseDecoder {
    pub config: DecoderConfig,
    pub grid: usize,
    pub neck: Linear,
    pub pos_embed: ParamId,
    pub output_token: ParamId,
    pub prompt_token: ParamId,
    pub layers: Vec<TwoWayLayer>,
    pub final_norm: LayerNorm,
    pub final_attn: Attention,
    pub up1: ConvTranspose2x2,
    pub up2: ConvTranspose2x2,
    pub hyper: Mlp,
}

impl BaseDecoder {
    pub fn new<S: Scalar>(
        b: &mut ParamBuilder<'_, S>,
        config: &DecoderConfig,
        encoder_dim: usize,
        grid: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let cm = config.mask_channels();
        Ok(Self {
            config: config.clone(),
            grid,
            neck: Linear::new(&mut b.sub("neck"), encoder_dim, d),
            pos_embed: b.normal("pos_embed", &[grid * grid, d], 0.02),
            output_token: b.normal("output_token", &[1, d], 1.0),
            prompt_token: b.normal("prompt_token", &[1, d], 1.0),
            layers: (0..config.layers)
                .map(|i| TwoWayLayer::new(&mut b.sub(&format!("layer{i}")), d, config.heads, config.mlp_ratio))
                .collect(),
            final_norm: LayerNorm::new(&mut b.sub("final_norm"), d),
            final_attn: Attention::new(&mut b.sub("final_attn"), d, config.heads),
            up1: ConvTranspose2x2::new(&mut b.sub("up1"), d, d / 2),
            up2: ConvTranspose2x2::new(&mut b.sub("up2"), d / 2, cm),
            hyper: Mlp::new(&mut b.sub("hyper"), &[d, d, d, cm]),
        })
    }

    /// `encoder_tokens` is `g² x C`; `dense_prompt` is `g² x Cd`; `extra_tokens`
    /// (`k x Cd`) join the output and prompt tokens for the whole pass.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<'_, S>,
        encoder_tokens: Var,
        dense_prompt: Option<Var>,
        extra_tokens: Option<Var>,
    ) -> Result<BaseOutput> {
        let n = self.grid;
        let d = self.config.embed_dim;
        if g.shape(encoder_tokens)[0] != n * n {
            return Err(Error::shape("base decode", g.shape(encoder_tokens), &[n * n, 0]));
        }
        let mut image = self.neck.forward(g, encoder_tokens)?;
        if let Some(p) = dense_prompt {
            image = g.add(image, p)?;
        }
        let pe = g.param(self.pos_embed)?;
        let out_tok = g.param(self.output_token)?;
        let prompt_tok = g.param(self.prompt_token)?;
        let mut tokens = match extra_tokens {
            Some(extra) => g.concat(&[out_tok, prompt_tok, extra], 0)?,
            None => g.concat(&[out_tok, prompt_tok], 0)?,
        };
        let mut attention = TokenAttention::default();
        for layer in &self.layers {
            (tokens, image) = layer.forward(g, tokens, image, pe, &mut attention)?;
        }
        let h = self.final_norm.forward(g, tokens)?;
        let keys = g.add(image, pe)?;
        let (a, raw) = self.final_attn.forward_traced(g, h, keys, image)?;
        attention.token_to_image.push(raw);
        let tokens = g.add(tokens, a)?;

        let map = g.transpose(image)?;
        let map = g.reshape(map, [d, n, n])?;
        let up = self.up1.forward(g, map)?;
        let up = g.relu(up)?;
        let f_mask = self.up2.forward(g, up)?;

        let cm = self.config.mask_channels();
        let out_row = g.slice(tokens, 0, 0, 1)?;
        let weights = self.hyper.forward(g, out_row)?;
        let side = 4 * n;
        let flat = g.reshape(f_mask, [cm, side * side])?;
        let logits = g.matmul(weights, flat)?;
        let logits = g.reshape(logits, [1, side, side])?;
        Ok(BaseOutput {
            tokens,
            f_mask,
            logits,
            attention,
        })
    }
}

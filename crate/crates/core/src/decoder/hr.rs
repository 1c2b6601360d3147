use crate::error::{Error, Result};
use crate::nn::{ConvTranspose2x2, Graph, Mlp, ParamBuilder, ParamId};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

use super::DecoderConfig;

pub const SLICES: usize = 16;

/// `C x H x W` to `16 x C x H/4 x W/4`; slice `k` at `(y, x)` holds the input
/// at `(4y + k/4, 4x + k%4)`.
pub fn feature_unensemble<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] % 4 != 0 || s[2] % 4 != 0 {
        return Err(Error::attr("feature_unensemble", format!("expected C x H x W with H, W divisible by 4, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1] / 4, s[2] / 4);
    let d = tape.space_to_depth(x, 4)?;
    let d = tape.reshape(d, [c, SLICES, h, w])?;
    tape.permute(d, &[1, 0, 2, 3])
}

/// Sixteen single-channel maps (`16 x 1 x h x w` or `16 x h x w`) to `1 x 4h x 4w`.
pub fn pixel_ensemble<S: Scalar>(tape: &mut Tape<S>, slices: Var) -> Result<Var> {
    let s = tape.shape(slices).to_vec();
    let (h, w) = match s.as_slice() {
        [SLICES, 1, h, w] | [SLICES, h, w] => (*h, *w),
        _ => {
            return Err(Error::attr(
                "pixel_ensemble",
                format!("expected 16 single-channel maps, got shape {s:?}"),
            ))
        }
    };
    let flat = tape.reshape(slices, [SLICES, h, w])?;
    tape.depth_to_space(flat, 4)
}

/// `S_k(y,x) = Σ_c m[k,c] · F[k,c,y,x]`, giving `16 x 1 x h x w`.
pub fn produce_slices<S: Scalar>(tape: &mut Tape<S>, weights: Var, f_slice: Var) -> Result<Var> {
    let ws = tape.shape(weights).to_vec();
    let fs = tape.shape(f_slice).to_vec();
    if ws.len() != 2 || fs.len() != 4 || ws[0] != SLICES || fs[0] != SLICES || ws[1] != fs[1] {
        return Err(Error::shape("produce_slices", &ws, &fs));
    }
    let (c, h, w) = (fs[1], fs[2], fs[3]);
    let m = tape.reshape(weights, [SLICES, c, 1])?;
    let f = tape.reshape(f_slice, [SLICES, c, h * w])?;
    let prod = tape.mul(m, f)?;
    let s = tape.sum_axis(prod, 1)?;
    tape.reshape(s, [SLICES, 1, h, w])
}

/// Trainable additions of the high-resolution decoder.
#[derive(Clone, Debug)]
pub struct HrHead {
    pub slice_tokens: ParamId,
    pub enc_up1: ConvTranspose2x2,
    pub enc_up2: ConvTranspose2x2,
    pub slice_mlp: Mlp,
    pub mask_channels: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct HrOutput {
    pub f_slice: Var,
    pub s_slice: Var,
    /// `1 x 16g x 16g`
    pub logits: Var,
}

impl HrHead {
    pub fn new<S: Scalar>(b: &mut ParamBuilder<'_, S>, config: &DecoderConfig, encoder_dim: usize) -> Self {
        let d = config.embed_dim;
        let cm = config.mask_channels();
        Self {
            slice_tokens: b.normal("slice_tokens", &[SLICES, d], 1.0),
            enc_up1: ConvTranspose2x2::new(&mut b.sub("enc_up1"), encoder_dim, 2 * cm),
            enc_up2: ConvTranspose2x2::new(&mut b.sub("enc_up2"), 2 * cm, cm),
            slice_mlp: Mlp::new(&mut b.sub("slice_mlp"), &[d, d, d, cm]),
            mask_channels: cm,
        }
    }

    /// `encoder_map` is `C x g x g`, `f_mask` is `C' x 4g x 4g`, `tokens` are
    /// the sixteen attended slice tokens.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, encoder_map: Var, f_mask: Var, tokens: Var) -> Result<HrOutput> {
        let e = self.enc_up1.forward(g, encoder_map)?;
        let e = g.relu(e)?;
        let e = self.enc_up2.forward(g, e)?;
        if g.shape(e) != g.shape(f_mask) {
            return Err(Error::shape("hr decode", g.shape(e), g.shape(f_mask)));
        }
        let fused = g.add(e, f_mask)?;
        let up = g.upsample_bilinear(fused, 4)?;
        let f_slice = feature_unensemble(g, up)?;
        let weights = self.slice_mlp.forward(g, tokens)?;
        let s_slice = produce_slices(g, weights, f_slice)?;
        let logits = pixel_ensemble(g, s_slice)?;
        Ok(HrOutput { f_slice, s_slice, logits })
    }
}

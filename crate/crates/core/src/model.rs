//! The assembled segmentation model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::Discriminator;
use crate::backbone::{Encoder, EncoderConfig, EncoderOutput, SpGen};
use crate::decoder::{BaseDecoder, DecoderConfig, DecoderMode, DecoderState, HrHead, SLICES};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, Graph, Linear, ParamBuilder, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, Var};

/// Parameter-name prefixes of the frozen base model.
pub const BASE_PREFIXES: [&str; 2] = ["encoder.", "decoder."];

#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub spgen: SpGen,
    /// Dense prompt: `16`-channel space-to-depth of the coarse map to `Cd`.
    pub prompt: Linear,
    pub decoder: BaseDecoder,
    pub hr: Option<HrHead>,
    pub discriminator: Option<Discriminator>,
    pub mode: DecoderMode,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub encoder: EncoderOutput,
    /// `1 x C` pooled encoder features for the discriminator.
    pub pooled: Var,
    /// `1 x 4g x 4g` coarse foreground probabilities.
    pub coarse: Var,
    pub decoder: DecoderState,
}

impl Model {
    /// Builds the model and its parameters. Each component draws its
    /// initialisation from its own seed stream, so optional parts never
    /// shift the weights of the others.
    pub fn new<S: Scalar>(
        encoder: &EncoderConfig,
        decoder: &DecoderConfig,
        discriminator_hidden: Option<usize>,
        seed: u64,
    ) -> Result<(Self, ParamStore<S>)> {
        encoder.validate()?;
        decoder.validate()?;
        let mut store = ParamStore::new();
        let base_trainable = !encoder.freeze_base;
        let grid = encoder.grid();

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "encoder"));
        let enc = Encoder::new(&mut ParamBuilder::new(&mut store, &mut rng, "", true), encoder)?;

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "spgen"));
        let spgen = SpGen::new(&mut ParamBuilder::new(&mut store, &mut rng, "spgen", true), encoder.embed_dim);
        let prompt = Linear::new(
            &mut ParamBuilder::new(&mut store, &mut rng, "prompt", true),
            SLICES,
            decoder.embed_dim,
        );

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "decoder"));
        let dec = BaseDecoder::new(
            &mut ParamBuilder::new(&mut store, &mut rng, "decoder", base_trainable),
            decoder,
            encoder.embed_dim,
            grid,
        )?;

        let hr = match decoder.mode {
            DecoderMode::Hr => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "hr"));
                Some(HrHead::new(
                    &mut ParamBuilder::new(&mut store, &mut rng, "hr", true),
                    decoder,
                    encoder.embed_dim,
                ))
            }
            DecoderMode::Base => None,
        };

        let discriminator = discriminator_hidden.map(|hidden| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "discriminator"));
            Discriminator::new(
                &mut ParamBuilder::new(&mut store, &mut rng, "disc", true),
                encoder.embed_dim,
                hidden,
            )
        });

        Ok((
            Self {
                encoder: enc,
                spgen,
                prompt,
                decoder: dec,
                hr,
                discriminator,
                mode: decoder.mode,
            },
            store,
        ))
    }

    pub fn image_size(&self) -> usize {
        self.encoder.config.image_size
    }

    /// Resolution the active decoder produces before resizing to native.
    pub fn decoder_resolution(&self) -> usize {
        let base = 4 * self.encoder.config.grid();
        match self.mode {
            DecoderMode::Base => base,
            DecoderMode::Hr => 4 * base,
        }
    }

    /// Full forward pass on a `3 x H x W` image; logits come back at `native`
    /// resolution.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<'_, S>, image: Var, native: usize) -> Result<ModelOutput> {
        let enc = self.encoder.forward(g, image)?;
        let pooled = self.encoder.pooled(g, &enc)?;
        let coarse = self.spgen.forward(g, enc.map)?;

        let n = self.encoder.config.grid();
        let packed = g.space_to_depth(coarse, 4)?;
        let packed = g.reshape(packed, [SLICES, n * n])?;
        let packed = g.transpose(packed)?;
        let dense = self.prompt.forward(g, packed)?;

        let extra = match &self.hr {
            Some(hr) => Some(g.param(hr.slice_tokens)?),
            None => None,
        };
        let base = self.decoder.forward(g, enc.tokens, Some(dense), extra)?;

        let (raw, state) = match &self.hr {
            Some(hr) => {
                let tokens = g.slice(base.tokens, 0, 2, SLICES)?;
                let out = hr.forward(g, enc.map, base.f_mask, tokens)?;
                let state = (Some(tokens), Some(out.f_slice), Some(out.s_slice));
                (out.logits, state)
            }
            None => (base.logits, (None, None, None)),
        };
        let logits = to_native(g, raw, native)?;
        Ok(ModelOutput {
            encoder: enc,
            pooled,
            coarse,
            decoder: DecoderState {
                f_mask: base.f_mask,
                slice_tokens: state.0,
                f_slice: state.1,
                s_slice: state.2,
                logits,
            },
        })
    }

    /// Tape-free probability map `1 x H x W` for one image.
    pub fn predict<S: Scalar>(&self, params: &ParamStore<S>, image: &Tensor<f64>) -> Result<Tensor<f64>> {
        let size = self.image_size();
        if image.shape() != [3, size, size] {
            return Err(Error::shape("predict", image.shape(), &[3, size, size]));
        }
        let mut g = Graph::inference(params);
        let x = g.input(image.cast())?;
        let out = self.forward(&mut g, x, size)?;
        let p = g.sigmoid(out.decoder.logits)?;
        Ok(g.value(p).cast())
    }
}

/// Bilinear resize to `native`, skipped when sizes already agree.
pub fn to_native<S: Scalar>(g: &mut Graph<'_, S>, logits: Var, native: usize) -> Result<Var> {
    let s = g.shape(logits);
    if s[1] == native && s[2] == native {
        Ok(logits)
    } else {
        g.resize_bilinear(logits, native, native)
    }
}

//! Finite-difference and exact-rule checks of the assembled model.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{probe, random_tensor, CheckResult};
use crate::align::{cgrl_loss, reverse, AlignMode, AlignmentBatch, DomainLabel, DomainWeights};
use crate::backbone::EncoderConfig;
use crate::decoder::{DecoderConfig, DecoderMode};
use crate::error::Result;
use crate::model::Model;
use crate::nn::{Graph, ParamId, ParamStore};
use crate::tensor::{relative_error, Tape, Tensor};

/// Smallest geometry that still exercises every component: a 4x4 feature
/// grid, a 64-pixel slice decoder and a resize back to 16.
pub fn toy_configs() -> (EncoderConfig, DecoderConfig) {
    let enc = EncoderConfig {
        image_size: 16,
        patch_size: 4,
        layers: 1,
        embed_dim: 8,
        adapter_hidden: 4,
        heads: 2,
        mlp_ratio: 2,
        freeze_base: true,
    };
    let dec = DecoderConfig {
        mode: DecoderMode::Hr,
        layers: 1,
        embed_dim: 8,
        heads: 2,
        mlp_ratio: 2,
    };
    (enc, dec)
}

/// Exact backward rule of the conditional reversal on `batches` random
/// mixed batches: auxiliary rows must equal `-λ` times the identity-layer
/// gradient, primary rows must be exactly zero.
pub fn check_cgrl(batches: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut aux_err: f64 = 0.0;
    let mut primary_nonzero = 0usize;
    for _ in 0..batches {
        let n = rng.gen_range(2..9);
        let c = rng.gen_range(1..7);
        let lambda = rng.gen_range(0.0..2.0);
        let mut labels: Vec<DomainLabel> = (0..n).map(|_| DomainLabel::new(rng.gen_range(0..4), 0)).collect();
        labels[0] = DomainLabel::new(0, 0);
        labels[1] = DomainLabel::new(1 + rng.gen_range(0..3), 0);
        let x = random_tensor(&mut rng, &[n, c], -2.0, 2.0, 0.0);
        let head = random_tensor(&mut rng, &[c, 3], -1.0, 1.0, 0.0);
        let rev = features_grad(&x, &head, &labels, lambda, AlignMode::Cgrl)?;
        let plain = features_grad(&x, &head, &labels, lambda, AlignMode::None)?;
        for (i, label) in labels.iter().enumerate() {
            for j in 0..c {
                let (r, p) = (rev.data()[i * c + j], plain.data()[i * c + j]);
                if label.is_primary {
                    primary_nonzero += usize::from(r != 0.0);
                } else {
                    aux_err = aux_err.max(relative_error(r, -lambda * p));
                }
            }
        }
    }
    let primary = if primary_nonzero == 0 { 0.0 } else { f64::INFINITY };
    let mut out = vec![
        CheckResult::new("cgrl_auxiliary_rows", aux_err, 1e-10),
        CheckResult::new("cgrl_primary_rows", primary, f64::MIN_POSITIVE),
    ];
    out.push(CheckResult::new("cgrl_loss", check_adversarial_loss(&mut rng)?, 1e-5));
    Ok(out)
}

/// Gradient of a nonlinear head at the features, seen through `mode`.
fn features_grad(
    x: &Tensor<f64>,
    head: &Tensor<f64>,
    labels: &[DomainLabel],
    lambda: f64,
    mode: AlignMode,
) -> Result<Tensor<f64>> {
    let mut t = Tape::new();
    let xv = t.leaf(x.clone(), true)?;
    let y = reverse(&mut t, xv, labels, lambda, mode)?;
    let w = t.constant(head.clone())?;
    let h = t.matmul(y, w)?;
    let h = t.sigmoid(h)?;
    let l = probe(&mut t, h)?;
    let grads = t.backward(l)?;
    Ok(grads.get(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec())))
}

/// Finite differences of the weighted adversarial loss through a small
/// discriminator, with respect to the discriminator weights.
fn check_adversarial_loss(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (enc, dec) = toy_configs();
    let (model, store) = Model::new::<f64>(&enc, &dec, Some(6), rng.gen())?;
    let features = random_tensor(rng, &[4, enc.embed_dim], -1.0, 1.0, 0.0);
    let labels = [0, 1, 2, 0].map(|d| DomainLabel::new(d, 0));
    let weights = DomainWeights { w_main: 1.4, w_aux: 0.7 };
    let disc = model.discriminator.clone().expect("discriminator requested");
    let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.name.starts_with("disc.")).map(|(id, _)| id).collect();
    let loss = |g: &mut Graph<'_, f64>| -> Result<_> {
        let f = g.input(features.clone())?;
        let batch = AlignmentBatch { features: f, labels: &labels, lambda: 0.5, weights };
        cgrl_loss(g, &batch, &disc, AlignMode::Cgrl)
    };
    let worst = param_grad_check(&store, &ids, usize::MAX, rng.gen(), &loss, |s, _| value_of(s, &loss))?;
    Ok(worst.into_iter().map(|(_, e)| e).fold(0.0, f64::max))
}

/// Scalar probe through the high-resolution forward pass, differentiated
/// with respect to the slice tokens.
pub fn check_decoder(seed: u64) -> Result<Vec<CheckResult>> {
    let (enc, dec) = toy_configs();
    let (model, store) = Model::new::<f64>(&enc, &dec, None, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xdec);
    let image = Tensor::from_fn([3, 16, 16], |_| rng.gen_range(0.0..1.0));
    let hr = model.hr.as_ref().expect("hr mode");
    let ids = [hr.slice_tokens];
    let loss = |g: &mut Graph<'_, f64>| -> Result<_> {
        let x = g.input(image.clone())?;
        let out = model.forward(g, x, 16)?;
        probe(g, out.decoder.logits)
    };
    let worst = param_grad_check(&store, &ids, 32, seed, &loss, |s, _| value_of(s, &loss))?;
    Ok(vec![CheckResult::new("hr_forward_slice_tokens", worst[0].1, 1e-5)])
}

/// Every trainable parameter group (adapters, SPGen, prompt, slice decoder,
/// discriminator) under a probe that runs encode, conditional reversal,
/// base decode and the high-resolution head on one primary and one
/// auxiliary image.
///
/// The reversal makes the encoder-side gradient differ from the gradient of
/// the loss, so the numeric reference applies the rule explicitly: for
/// encoder-side parameters it differentiates `task - λ·adv` with the primary
/// feature row held fixed; for the discriminator it differentiates `task + adv`.
pub fn check_full(seed: u64) -> Result<Vec<CheckResult>> {
    const LAMBDA: f64 = 0.8;
    let (enc, dec) = toy_configs();
    let (model, store) = Model::new::<f64>(&enc, &dec, Some(6), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf011);
    let images: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::from_fn([3, 16, 16], |_| rng.gen_range(0.0..1.0))).collect();
    let labels = [DomainLabel::new(0, 0), DomainLabel::new(1, 0)];
    let disc = model.discriminator.clone().expect("discriminator requested");

    // Task probes plus the pooled feature row of each image.
    let task = |g: &mut Graph<'_, f64>| -> Result<(crate::tensor::Var, Vec<crate::tensor::Var>)> {
        let mut acc = None;
        let mut pooled = Vec::new();
        for img in &images {
            let x = g.input(img.clone())?;
            let out = model.forward(g, x, 16)?;
            for v in [out.decoder.logits, out.coarse] {
                let p = probe(g, v)?;
                acc = Some(match acc {
                    Some(a) => g.add(a, p)?,
                    None => p,
                });
            }
            pooled.push(out.pooled);
        }
        Ok((acc.expect("two images"), pooled))
    };
    let adversarial = |g: &mut Graph<'_, f64>, rows: &[crate::tensor::Var], mode: AlignMode| {
        let features = g.concat(rows, 0)?;
        let batch = AlignmentBatch {
            features,
            labels: &labels,
            lambda: LAMBDA,
            weights: DomainWeights::default(),
        };
        cgrl_loss(g, &batch, &disc, mode)
    };
    let loss = |g: &mut Graph<'_, f64>| -> Result<_> {
        let (t, pooled) = task(g)?;
        let a = adversarial(g, &pooled, AlignMode::Cgrl)?;
        g.add(t, a)
    };
    let primary_row = {
        let mut g = Graph::inference(&store);
        let (_, pooled) = task(&mut g)?;
        g.value(pooled[0]).clone()
    };
    let reference = |s: &ParamStore<f64>, id: ParamId| -> Result<f64> {
        let mut g = Graph::inference(s);
        let (t, pooled) = task(&mut g)?;
        if s.get(id).name.starts_with("disc.") {
            let a = adversarial(&mut g, &pooled, AlignMode::None)?;
            Ok(g.value(t).item() + g.value(a).item())
        } else {
            let fixed = g.input(primary_row.clone())?;
            let a = adversarial(&mut g, &[fixed, pooled[1]], AlignMode::None)?;
            Ok(g.value(t).item() - LAMBDA * g.value(a).item())
        }
    };
    let ids = store.trainable_ids();
    let per_param = param_grad_check(&store, &ids, 6, seed, loss, reference)?;
    let mut groups: Vec<CheckResult> = Vec::new();
    for (id, err) in per_param {
        let name = store.get(id).name.split('.').next().unwrap_or_default().to_string();
        match groups.iter_mut().find(|c| c.name == name) {
            Some(c) => c.max_rel_err = c.max_rel_err.max(err),
            None => groups.push(CheckResult::new(name, err, 1e-4)),
        }
    }
    Ok(groups)
}

/// Scalar value of `loss` on a tape-free graph.
fn value_of<F>(store: &ParamStore<f64>, loss: &F) -> Result<f64>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<crate::tensor::Var>,
{
    let mut g = Graph::inference(store);
    let l = loss(&mut g)?;
    Ok(g.value(l).item())
}

/// Worst relative error per parameter between the tape gradient of `loss`
/// and central differences of `reference` over at most `per_param` sampled
/// coordinates.
fn param_grad_check<F, R>(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    per_param: usize,
    seed: u64,
    loss: F,
    reference: R,
) -> Result<Vec<(ParamId, f64)>>
where
    F: for<'p> Fn(&mut Graph<'p, f64>) -> Result<crate::tensor::Var>,
    R: Fn(&ParamStore<f64>, ParamId) -> Result<f64>,
{
    const H: f64 = 1e-6;
    let mut g = Graph::new(store);
    for &id in ids {
        g.param(id)?;
    }
    let l = loss(&mut g)?;
    let grads = g.backward(l)?;
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            let v = g.bound(id).expect("bound above");
            grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(store.get(id).value.shape().to_vec()))
        })
        .collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut out = Vec::with_capacity(ids.len());
    for (&id, grad) in ids.iter().zip(&analytic) {
        let len = store.get(id).value.len();
        let coords: Vec<usize> = if per_param >= len {
            (0..len).collect()
        } else {
            sample(&mut rng, len, per_param).into_vec()
        };
        let mut worst: f64 = 0.0;
        for k in coords {
            let orig = store.get(id).value.data()[k];
            work.value_mut(id).data_mut()[k] = orig + H;
            let up = reference(&work, id)?;
            work.value_mut(id).data_mut()[k] = orig - H;
            let down = reference(&work, id)?;
            work.value_mut(id).data_mut()[k] = orig;
            worst = worst.max(relative_error(grad.data()[k], (up - down) / (2.0 * H)));
        }
        out.push((id, worst));
    }
    Ok(out)
}

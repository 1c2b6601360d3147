use nucleiforge::decoder::{feature_unensemble, pixel_ensemble, produce_slices, DecoderMode, SLICES};
use nucleiforge::diagnostics::toy_configs;
use nucleiforge::model::{Model, BASE_PREFIXES};
use nucleiforge::nn::{Graph, ParamStore};
use nucleiforge::tensor::{Tape, Tensor};
use nucleiforge::train::fine_loss;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unensemble(x: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let v = t.constant(x.clone()).unwrap();
    let y = feature_unensemble(&mut t, v).unwrap();
    t.value(y).clone()
}

fn ensemble(x: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let v = t.constant(x.clone()).unwrap();
    let y = pixel_ensemble(&mut t, v).unwrap();
    t.value(y).clone()
}

fn slices(weights: &Tensor<f64>, f: &Tensor<f64>) -> Tensor<f64> {
    let mut t = Tape::new();
    let w = t.constant(weights.clone()).unwrap();
    let f = t.constant(f.clone()).unwrap();
    let y = produce_slices(&mut t, w, f).unwrap();
    t.value(y).clone()
}

#[test]
fn unensemble_enumerates_the_lattice() {
    let x = Tensor::from_fn([1, 4, 4], |i| i as f64);
    let s = unensemble(&x);
    assert_eq!(s.shape(), [16, 1, 1, 1]);
    assert_eq!(s.data(), (0..16).map(f64::from).collect::<Vec<_>>());
}

#[test]
fn unensemble_index_map_on_a_larger_input() {
    let (c, h, w) = (3, 8, 12);
    let x = Tensor::from_fn([c, h, w], |i| i as f64);
    let s = unensemble(&x);
    assert_eq!(s.shape(), [16, c, h / 4, w / 4]);
    for k in 0..16 {
        for ch in 0..c {
            for y in 0..h / 4 {
                for xx in 0..w / 4 {
                    let got = s.data()[((k * c + ch) * (h / 4) + y) * (w / 4) + xx];
                    let want = x.data()[(ch * h + 4 * y + k / 4) * w + 4 * xx + k % 4];
                    assert_eq!(got, want);
                }
            }
        }
    }
}

#[test]
fn constant_input_gives_constant_slices() {
    let s = unensemble(&Tensor::full([2, 8, 8], 0.37));
    assert!(s.data().iter().all(|&v| v == 0.37));
}

#[test]
fn ensemble_tiles_the_slice_index() {
    let s = Tensor::from_fn([16, 1, 2, 3], |i| (i / 6) as f64);
    let out = ensemble(&s);
    assert_eq!(out.shape(), [1, 8, 12]);
    for y in 0..8 {
        for x in 0..12 {
            assert_eq!(out.data()[y * 12 + x], (4 * (y % 4) + x % 4) as f64);
        }
    }
}

#[test]
fn ensemble_rejects_bad_slice_sets() {
    let mut t = Tape::<f64>::new();
    let fifteen = t.constant(Tensor::zeros([15, 1, 2, 2])).unwrap();
    assert!(pixel_ensemble(&mut t, fifteen).is_err());
    let two_channel = t.constant(Tensor::zeros([16, 2, 2, 2])).unwrap();
    assert!(pixel_ensemble(&mut t, two_channel).is_err());
    let odd = t.constant(Tensor::zeros([1, 6, 8])).unwrap();
    assert!(feature_unensemble(&mut t, odd).is_err());
}

#[test]
fn produce_slices_rejects_channel_mismatch() {
    let mut t = Tape::<f64>::new();
    let w = t.constant(Tensor::zeros([16, 3])).unwrap();
    let f = t.constant(Tensor::zeros([16, 4, 2, 2])).unwrap();
    assert!(produce_slices(&mut t, w, f).is_err());
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-3.0..3.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ensemble_inverts_unensemble(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let x = random(&mut ChaCha8Rng::seed_from_u64(seed), &[1, 4 * h, 4 * w]);
        prop_assert!(ensemble(&unensemble(&x)).bitwise_eq(&x));
    }

    #[test]
    fn unensemble_inverts_ensemble(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let s = random(&mut ChaCha8Rng::seed_from_u64(seed), &[16, 1, h, w]);
        prop_assert!(unensemble(&ensemble(&s)).bitwise_eq(&s));
    }

    #[test]
    fn produce_slices_is_linear_in_features(c in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random(&mut rng, &[16, c]);
        let f = random(&mut rng, &[16, c, 2, 3]);
        let doubled = slices(&m, &f.map(|v| 2.0 * v));
        prop_assert!(doubled.bitwise_eq(&slices(&m, &f).map(|v| 2.0 * v)));
    }
}

#[test]
fn one_hot_weights_select_a_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (c, h, w) = (4, 3, 2);
    let f = random(&mut rng, &[16, c, h, w]);
    for pick in 0..c {
        let m = Tensor::from_fn([16, c], |i| if i % c == pick { 1.0 } else { 0.0 });
        let s = slices(&m, &f);
        for k in 0..16 {
            for p in 0..h * w {
                assert_eq!(s.data()[k * h * w + p], f.data()[(k * c + pick) * h * w + p]);
            }
        }
    }
    let zero = slices(&Tensor::zeros([16, c]), &f);
    assert!(zero.data().iter().all(|&v| v == 0.0));
}

#[test]
fn equal_weights_on_constant_features_give_a_constant_map() {
    let m = Tensor::from_fn([16, 3], |i| [0.3, -1.2, 0.8][i % 3]);
    let f = Tensor::from_fn([16, 3, 4, 4], |i| [1.5, 0.25, -2.0][(i / 16) % 3]);
    let out = ensemble(&slices(&m, &f));
    let first = out.data()[0];
    assert!(out.data().iter().all(|&v| v == first));
}

fn toy(mode: DecoderMode, seed: u64) -> (Model, ParamStore<f64>) {
    let (enc, mut dec) = toy_configs();
    dec.mode = mode;
    Model::new::<f64>(&enc, &dec, None, seed).unwrap()
}

fn image(seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([3, 16, 16], |_| rng.gen_range(0.0..1.0))
}

#[test]
fn output_geometry() {
    let (model, store) = toy(DecoderMode::Hr, 0);
    assert_eq!(model.decoder_resolution(), 64);
    for native in [8, 16, 64] {
        let mut g = Graph::new(&store);
        let x = g.input(image(1)).unwrap();
        let out = model.forward(&mut g, x, native).unwrap();
        assert_eq!(g.shape(out.decoder.logits), [1, native, native]);
        assert_eq!(g.shape(out.decoder.f_mask), [2, 16, 16]);
        assert_eq!(g.shape(out.decoder.f_slice.unwrap()), [16, 2, 16, 16]);
        assert_eq!(g.shape(out.decoder.s_slice.unwrap()), [16, 1, 16, 16]);
        assert_eq!(g.shape(out.decoder.slice_tokens.unwrap()), [SLICES, 8]);
    }
    let (base, _) = toy(DecoderMode::Base, 0);
    assert_eq!(base.decoder_resolution(), 16);
}

#[test]
fn base_decode_is_pure() {
    let (model, store) = toy(DecoderMode::Hr, 4);
    let run = || {
        let mut g = Graph::new(&store);
        let x = g.input(image(5)).unwrap();
        let out = model.forward(&mut g, x, 16).unwrap();
        (g.value(out.decoder.f_mask).clone(), g.value(out.decoder.logits).clone())
    };
    let (a, b) = (run(), run());
    assert!(a.0.bitwise_eq(&b.0));
    assert!(a.1.bitwise_eq(&b.1));
}

/// Runs the base decoder with the given slice tokens; returns the updated
/// slice rows and the raw attention probabilities of every layer.
fn attend(model: &Model, store: &ParamStore<f64>, extra: &Tensor<f64>) -> (Tensor<f64>, Vec<Vec<f64>>) {
    let mut g = Graph::new(store);
    let x = g.input(image(7)).unwrap();
    let enc = model.encoder.forward(&mut g, x).unwrap();
    // Attention probabilities are kept only on nodes that require gradients.
    let extra = g.leaf(extra.clone(), true).unwrap();
    let out = model.decoder.forward(&mut g, enc.tokens, None, Some(extra)).unwrap();
    let rows = g.slice(out.tokens, 0, 2, SLICES).unwrap();
    let probs = out
        .attention
        .self_attn
        .iter()
        .chain(&out.attention.token_to_image)
        .map(|&v| g.saved_attention(v).unwrap().to_vec())
        .collect();
    (g.value(rows).clone(), probs)
}

#[test]
fn token_attention_rows_are_distributions() {
    let (model, store) = toy(DecoderMode::Hr, 2);
    let tokens = store.get(model.hr.as_ref().unwrap().slice_tokens).value.clone();
    let (_, probs) = attend(&model, &store, &tokens);
    assert!(!probs.is_empty());
    let n_tokens = 2 + SLICES;
    for p in &probs {
        // [heads, n_tokens, keys]
        let keys = p.len() / (2 * n_tokens);
        for row in p.chunks(keys) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn permuting_slice_tokens_permutes_their_updates() {
    let (model, store) = toy(DecoderMode::Hr, 3);
    let tokens = store.get(model.hr.as_ref().unwrap().slice_tokens).value.clone();
    let d = tokens.shape()[1];
    let perm: Vec<usize> = (0..SLICES).map(|k| (5 * k + 3) % SLICES).collect();
    let permuted = Tensor::from_fn([SLICES, d], |i| tokens.data()[perm[i / d] * d + i % d]);
    let (a, _) = attend(&model, &store, &tokens);
    let (b, _) = attend(&model, &store, &permuted);
    for k in 0..SLICES {
        for j in 0..d {
            let (x, y) = (b.data()[k * d + j], a.data()[perm[k] * d + j]);
            assert!((x - y).abs() < 1e-12, "{k} {j}: {x} vs {y}");
        }
    }
}

#[test]
fn every_output_pixel_depends_on_every_slice_token() {
    let (model, store) = toy(DecoderMode::Hr, 6);
    let id = model.hr.as_ref().unwrap().slice_tokens;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..24 {
        let pixel = rng.gen_range(0..64 * 64);
        let mut g = Graph::new(&store);
        let x = g.input(image(9)).unwrap();
        let out = model.forward(&mut g, x, 64).unwrap();
        let flat = g.reshape(out.decoder.logits, [64 * 64]).unwrap();
        let one = g.slice(flat, 0, pixel, 1).unwrap();
        let l = g.sum(one).unwrap();
        let grads = g.backward(l).unwrap();
        let grad = grads.get(g.bound(id).unwrap()).unwrap();
        let d = grad.shape()[1];
        for k in 0..SLICES {
            assert!(grad.data()[k * d..(k + 1) * d].iter().any(|&v| v != 0.0), "pixel {pixel} token {k}");
        }
    }
}

#[test]
fn fine_loss_reaches_slice_tokens_but_no_base_parameter() {
    let (model, store) = toy(DecoderMode::Hr, 10);
    let mut g = Graph::new(&store);
    let x = g.input(image(11)).unwrap();
    let out = model.forward(&mut g, x, 16).unwrap();
    let mask = Tensor::from_fn([1, 16, 16], |i| f64::from(i % 5 == 0));
    let l = fine_loss(&mut g, out.decoder.logits, &mask).unwrap();
    let grads = g.backward(l).unwrap();
    let mut base_seen = 0;
    for (id, p) in store.iter() {
        let Some(v) = g.bound(id) else { continue };
        if BASE_PREFIXES.iter().any(|b| p.name.starts_with(b)) {
            base_seen += 1;
            assert!(grads.get(v).map_or(true, |t| t.data().iter().all(|&x| x == 0.0)), "{}", p.name);
        }
    }
    assert!(base_seen > 0);
    let tok = grads.get(g.bound(model.hr.as_ref().unwrap().slice_tokens).unwrap()).unwrap();
    assert!(tok.data().iter().any(|&v| v != 0.0));
}

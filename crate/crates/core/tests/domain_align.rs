mod common;

use std::collections::BTreeMap;

use common::direct_domain_bce;
use nucleiforge::align::{
    cgrl, cgrl_loss, domain_weights, grl, reverse, weighted_domain_bce, AlignMode, AlignmentBatch, Discriminator,
    DomainLabel, DomainWeights,
};
use nucleiforge::nn::{Graph, Linear, ParamBuilder, ParamId, ParamStore};
use nucleiforge::tensor::{relative_error, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn aux() -> DomainLabel {
    DomainLabel::new(1, 0)
}

fn primary() -> DomainLabel {
    DomainLabel::new(0, 0)
}

/// Gradient reaching `x` when `sum(layer(x) ∘ upstream)` is differentiated.
fn row_grads(upstream: &[f64], labels: &[DomainLabel], lambda: f64, mode: AlignMode) -> Vec<f64> {
    let n = labels.len();
    let c = upstream.len() / n;
    let mut t = Tape::<f64>::new();
    let x = t.leaf(Tensor::from_fn([n, c], |i| i as f64 * 0.3 - 1.0), true).unwrap();
    let y = reverse(&mut t, x, labels, lambda, mode).unwrap();
    let u = t.constant(Tensor::new([n, c], upstream.to_vec()).unwrap()).unwrap();
    let p = t.mul(y, u).unwrap();
    let l = t.sum(p).unwrap();
    let g = t.backward(l).unwrap();
    g.get(x).unwrap().data().to_vec()
}

#[test]
fn auxiliary_row_is_reversed_and_scaled() {
    assert_eq!(row_grads(&[1.0, -2.0], &[aux()], 0.5, AlignMode::Cgrl), vec![-0.5, 1.0]);
}

#[test]
fn primary_row_is_blocked() {
    assert_eq!(row_grads(&[3.0, -7.5], &[primary()], 0.5, AlignMode::Cgrl), vec![0.0, 0.0]);
}

#[test]
fn zero_lambda_gives_zero_rows() {
    let g = row_grads(&[1.0, 2.0, 3.0, 4.0], &[aux(), aux()], 0.0, AlignMode::Cgrl);
    assert!(g.iter().all(|&v| v == 0.0));
}

#[test]
fn grl_reverses_every_row() {
    let g = row_grads(&[1.0, 2.0, 3.0, 4.0], &[primary(), aux()], 2.0, AlignMode::Grl);
    assert_eq!(g, vec![-2.0, -4.0, -6.0, -8.0]);
}

#[test]
fn swapping_the_primary_domain_flips_zeroed_rows() {
    let up = [1.0, -1.0, 2.0, -2.0, 3.0, -3.0];
    let ids = [0u32, 1, 0];
    let a: Vec<DomainLabel> = ids.iter().map(|&d| DomainLabel::new(d, 0)).collect();
    let b: Vec<DomainLabel> = ids.iter().map(|&d| DomainLabel::new(d, 1)).collect();
    let ga = row_grads(&up, &a, 1.0, AlignMode::Cgrl);
    let gb = row_grads(&up, &b, 1.0, AlignMode::Cgrl);
    for row in 0..3 {
        let (ra, rb) = (&ga[2 * row..2 * row + 2], &gb[2 * row..2 * row + 2]);
        if ids[row] == 0 {
            assert_eq!(ra, [0.0, 0.0]);
            assert_eq!(rb, [-up[2 * row], -up[2 * row + 1]]);
        } else {
            assert_eq!(ra, [-up[2 * row], -up[2 * row + 1]]);
            assert_eq!(rb, [0.0, 0.0]);
        }
    }
}

#[test]
fn degenerate_batches_are_rejected() {
    let mut t = Tape::<f64>::new();
    let empty = t.leaf(Tensor::zeros([2, 0]), true).unwrap();
    assert!(cgrl(&mut t, empty, &[aux(), aux()], 1.0).is_err());
    let x = t.leaf(Tensor::zeros([2, 3]), true).unwrap();
    assert!(cgrl(&mut t, x, &[aux()], 1.0).is_err());
    assert!(grl(&mut t, x, &[aux(), aux()], -1.0).is_err());
}

proptest! {
    #[test]
    fn forward_is_the_identity(
        data in prop::collection::vec(-1e6f64..1e6, 12),
        flags in prop::collection::vec(any::<bool>(), 4),
        lambda in 0.0f64..10.0,
    ) {
        let labels: Vec<DomainLabel> = flags.iter().map(|&f| DomainLabel::new(if f { 0 } else { 2 }, 0)).collect();
        let x = Tensor::new([4, 3], data).unwrap();
        let mut t = Tape::<f64>::new();
        let v = t.leaf(x.clone(), true).unwrap();
        let y = cgrl(&mut t, v, &labels, lambda).unwrap();
        prop_assert!(t.value(y).bitwise_eq(&x));
        prop_assert_eq!(t.value(y).max_abs_diff(&x), 0.0);
    }

    #[test]
    fn weight_ratio_is_inverse_size(n_main in 1usize..500, a in 1usize..300, b in 0usize..300) {
        let mut sizes = BTreeMap::from([(0u32, n_main), (1, a)]);
        if b > 0 {
            sizes.insert(2, b);
        }
        let w = domain_weights(&sizes, 0).unwrap();
        let n_aux = (a + b) as f64;
        prop_assert!((w.w_main / w.w_aux - n_aux / n_main as f64).abs() < 1e-12 * (n_aux / n_main as f64).max(1.0));
        prop_assert!((w.w_main * n_main as f64 - w.w_aux * n_aux).abs() < 1e-12 * (n_main as f64 + n_aux));
    }
}

#[test]
fn balanced_weights_are_one() {
    let w = domain_weights(&BTreeMap::from([(0, 50), (3, 50)]), 0).unwrap();
    assert_eq!(w, DomainWeights { w_main: 1.0, w_aux: 1.0 });
}

#[test]
fn weights_for_forty_and_one_hundred_twenty() {
    // T = 160: w_main = 160 / 80, w_aux = 160 / 240.
    let w = domain_weights(&BTreeMap::from([(0, 40), (1, 70), (2, 50)]), 0).unwrap();
    assert!((w.w_main - 2.0).abs() < 1e-15);
    assert!((w.w_aux - 2.0 / 3.0).abs() < 1e-15);
}

fn bce_of(probs: &[f64], labels: &[DomainLabel], w: DomainWeights) -> f64 {
    let mut t = Tape::<f64>::new();
    let p = t.constant(Tensor::new([probs.len(), 1], probs.to_vec()).unwrap()).unwrap();
    let l = weighted_domain_bce(&mut t, p, labels, w).unwrap();
    t.value(l).item()
}

#[test]
fn half_probability_gives_ln_two() {
    let l = bce_of(&[0.5, 0.5], &[primary(), aux()], DomainWeights::default());
    assert!((l - std::f64::consts::LN_2).abs() < 1e-15, "{l}");
    assert!((l - 0.693147).abs() < 1e-6);
}

#[test]
fn perfect_discriminator_gives_near_zero_loss() {
    let l = bce_of(&[1.0, 0.0], &[primary(), aux()], DomainWeights::default());
    assert!(l > 0.0 && l < 1e-6, "{l}");
}

#[test]
fn all_primary_batch_keeps_only_the_positive_term() {
    let p = [0.2, 0.7, 0.9];
    let w = DomainWeights { w_main: 1.5, w_aux: 7.0 };
    let l = bce_of(&p, &[primary(); 3], w);
    let expect = -p.iter().map(|&x| 1.5 * f64::ln(x)).sum::<f64>() / 3.0;
    assert!((l - expect).abs() < 1e-14);
}

#[test]
fn loss_matches_direct_evaluation_on_random_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = rng.gen_range(1..9);
        let labels: Vec<DomainLabel> = (0..n).map(|_| DomainLabel::new(rng.gen_range(0..3), 0)).collect();
        let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let w = DomainWeights { w_main: rng.gen_range(0.1..3.0), w_aux: rng.gen_range(0.1..3.0) };
        let direct = direct_domain_bce(&probs, &labels, w);
        assert!((bce_of(&probs, &labels, w) - direct).abs() < 1e-12);
    }
}

struct Toy {
    store: ParamStore<f64>,
    enc: [Linear; 2],
    disc: Discriminator,
}

fn toy(seed: u64) -> Toy {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut b = ParamBuilder::new(&mut store, &mut rng, "", true);
    let enc = [Linear::new(&mut b.sub("enc0"), 5, 6), Linear::new(&mut b.sub("enc1"), 6, 4)];
    let disc = Discriminator::new(&mut b.sub("disc"), 4, 8);
    Toy { store, enc, disc }
}

/// Encoder and discriminator gradients of the adversarial loss.
fn toy_grads(m: &Toy, x: &Tensor<f64>, labels: &[DomainLabel], lambda: f64, mode: AlignMode) -> Vec<(ParamId, Tensor<f64>)> {
    let mut g = Graph::new(&m.store);
    let xv = g.input(x.clone()).unwrap();
    let h = m.enc[0].forward(&mut g, xv).unwrap();
    let h = g.relu(h).unwrap();
    let f = m.enc[1].forward(&mut g, h).unwrap();
    let batch = AlignmentBatch { features: f, labels, lambda, weights: DomainWeights { w_main: 1.3, w_aux: 0.8 } };
    let l = cgrl_loss(&mut g, &batch, &m.disc, mode).unwrap();
    let grads = g.backward(l).unwrap();
    g.param_grads(&grads)
}

fn is_encoder(m: &Toy, id: ParamId) -> bool {
    m.store.get(id).name.starts_with("enc")
}

#[test]
fn encoder_gradient_is_minus_lambda_times_identity_gradient_on_auxiliary_batches() {
    let m = toy(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = Tensor::from_fn([6, 5], |_| rng.gen_range(-1.0..1.0));
    let labels = vec![aux(); 6];
    let lambda = 0.7;
    let rev = toy_grads(&m, &x, &labels, lambda, AlignMode::Cgrl);
    let plain = toy_grads(&m, &x, &labels, lambda, AlignMode::None);
    let mut worst: f64 = 0.0;
    for ((id, a), (_, b)) in rev.iter().zip(&plain) {
        for (&ga, &gb) in a.data().iter().zip(b.data()) {
            if is_encoder(&m, *id) {
                worst = worst.max(relative_error(ga, -lambda * gb));
            } else {
                assert_eq!(ga, gb, "discriminator gradient must not be reversed");
            }
        }
    }
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn encoder_gradient_vanishes_on_primary_batches() {
    let m = toy(8);
    let x = Tensor::from_fn([4, 5], |i| (i as f64 * 0.37).sin());
    let labels = vec![primary(); 4];
    let rev = toy_grads(&m, &x, &labels, 1.0, AlignMode::Cgrl);
    let plain = toy_grads(&m, &x, &labels, 1.0, AlignMode::None);
    let mut saw_encoder = false;
    for ((id, a), (_, b)) in rev.iter().zip(&plain) {
        if is_encoder(&m, *id) {
            saw_encoder = true;
            assert!(a.data().iter().all(|&v| v == 0.0));
        } else {
            assert!(a.bitwise_eq(b));
        }
    }
    assert!(saw_encoder);
}

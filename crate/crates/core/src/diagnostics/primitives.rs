//! Finite-difference checks for every tensor primitive.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::CheckResult;
use crate::error::Result;
use crate::tensor::{grad_check, Padding, Tape, Tensor, Var};

type Probe = fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Random tensor with entries in `[lo, hi)` whose magnitude stays at least `gap` from zero.
pub(crate) fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64, gap: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| loop {
        let v = rng.gen_range(lo..hi);
        if v.abs() >= gap {
            break v;
        }
    })
}

/// Reduces any tensor to a scalar through a fixed, non-uniform weighting so
/// that every output coordinate contributes a distinct amount.
pub(crate) fn probe(t: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let w = Tensor::from_fn(shape, |i| ((i * 7919 % 97) as f64 / 97.0) - 0.4);
    let w = t.constant(w)?;
    let yw = t.mul(y, w)?;
    t.sum(yw)
}

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: Probe,
}

fn cases(rng: &mut ChaCha8Rng) -> Vec<Case> {
    let mut r = |s: &[usize]| random_tensor(rng, s, -1.0, 1.0, 0.0);
    let a23 = r(&[2, 3]);
    let b23 = r(&[2, 3]);
    let b3 = r(&[3]);
    let m34 = r(&[3, 4]);
    let img = r(&[2, 4, 4]);
    let w = r(&[3, 2, 3, 3]);
    let bias = r(&[3]);
    let x34 = r(&[3, 4]);
    let x234 = r(&[2, 3, 4]);
    let img8 = r(&[2, 4, 8]);
    let d16 = r(&[16, 2, 2]);
    let q = r(&[4, 8]);
    let k = r(&[5, 8]);
    let v = r(&[5, 8]);
    let mut relu_in = Tensor::zeros([3, 4]);
    let mut probs = Tensor::zeros([3, 4]);
    let mut target = Tensor::zeros([3, 4]);
    let (relu_in, probs, target) = {
        let mut g = ChaCha8Rng::seed_from_u64(r(&[1]).data()[0].to_bits());
        for x in relu_in.data_mut() {
            *x = if g.gen_bool(0.5) { g.gen_range(0.05..1.0) } else { -g.gen_range(0.05..1.0) };
        }
        for p in probs.data_mut() {
            *p = g.gen_range(0.05..0.95);
        }
        for t in target.data_mut() {
            *t = if g.gen_bool(0.5) { 1.0 } else { 0.0 };
        }
        (relu_in, probs, target)
    };
    let pt = Tensor::new([2, 3, 4], [probs.data(), target.data()].concat()).unwrap();

    vec![
        Case { name: "add", inputs: vec![a23.clone(), b3.clone()], f: |t, v| { let y = t.add(v[0], v[1])?; probe(t, y) } },
        Case { name: "sub", inputs: vec![a23.clone(), b23.clone()], f: |t, v| { let y = t.sub(v[0], v[1])?; probe(t, y) } },
        Case { name: "mul", inputs: vec![a23.clone(), b3], f: |t, v| { let y = t.mul(v[0], v[1])?; probe(t, y) } },
        Case { name: "scale", inputs: vec![a23.clone()], f: |t, v| { let y = t.scale(v[0], -1.7)?; probe(t, y) } },
        Case { name: "matmul", inputs: vec![a23.clone(), m34], f: |t, v| { let y = t.matmul(v[0], v[1])?; probe(t, y) } },
        Case { name: "conv2d_same", inputs: vec![img.clone(), w.clone(), bias.clone()], f: |t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), Padding::Same)?; probe(t, y) } },
        Case { name: "conv2d_valid", inputs: vec![img.clone(), w, bias], f: |t, v| { let y = t.conv2d(v[0], v[1], Some(v[2]), Padding::Valid)?; probe(t, y) } },
        Case { name: "relu", inputs: vec![relu_in], f: |t, v| { let y = t.relu(v[0])?; probe(t, y) } },
        Case { name: "sigmoid", inputs: vec![x34.clone()], f: |t, v| { let y = t.sigmoid(v[0])?; probe(t, y) } },
        Case { name: "softmax", inputs: vec![x234.clone()], f: |t, v| { let y = t.softmax(v[0], 1)?; probe(t, y) } },
        Case { name: "layer_norm", inputs: vec![x234.clone()], f: |t, v| { let y = t.layer_norm(v[0], 2, 1e-5)?; probe(t, y) } },
        Case { name: "transpose", inputs: vec![x34.clone()], f: |t, v| { let y = t.transpose(v[0])?; probe(t, y) } },
        Case { name: "permute", inputs: vec![x234.clone()], f: |t, v| { let y = t.permute(v[0], &[2, 0, 1])?; probe(t, y) } },
        Case { name: "reshape", inputs: vec![x234.clone()], f: |t, v| { let y = t.reshape(v[0], [6, 4])?; probe(t, y) } },
        Case { name: "concat", inputs: vec![a23.clone(), b23], f: |t, v| { let y = t.concat(&[v[0], v[1], v[0]], 1)?; probe(t, y) } },
        Case { name: "slice", inputs: vec![x234.clone()], f: |t, v| { let y = t.slice(v[0], 1, 1, 2)?; probe(t, y) } },
        Case { name: "sum", inputs: vec![x34.clone()], f: |t, v| { let y = t.sum(v[0])?; let y2 = t.mul(y, y)?; t.sum(y2) } },
        Case { name: "mean", inputs: vec![x34.clone()], f: |t, v| { let y = t.mean(v[0])?; let y2 = t.mul(y, y)?; t.sum(y2) } },
        Case { name: "sum_axis", inputs: vec![x234.clone()], f: |t, v| { let y = t.sum_axis(v[0], 1)?; probe(t, y) } },
        Case { name: "mean_axis", inputs: vec![x234], f: |t, v| { let y = t.mean_axis(v[0], 2)?; probe(t, y) } },
        Case { name: "upsample_nearest", inputs: vec![img.clone()], f: |t, v| { let y = t.upsample_nearest(v[0], 3)?; probe(t, y) } },
        Case { name: "upsample_bilinear", inputs: vec![img.clone()], f: |t, v| { let y = t.upsample_bilinear(v[0], 4)?; probe(t, y) } },
        Case { name: "resize_bilinear_down", inputs: vec![img8], f: |t, v| { let y = t.resize_bilinear(v[0], 3, 5)?; probe(t, y) } },
        Case { name: "space_to_depth", inputs: vec![img.clone()], f: |t, v| { let y = t.space_to_depth(v[0], 2)?; probe(t, y) } },
        Case { name: "depth_to_space", inputs: vec![d16], f: |t, v| { let y = t.depth_to_space(v[0], 4)?; probe(t, y) } },
        Case { name: "attention", inputs: vec![q, k, v], f: |t, v| { let y = t.attention(v[0], v[1], v[2], 2)?; probe(t, y) } },
        Case {
            name: "bce",
            inputs: vec![pt.clone()],
            f: |t, v| {
                let x = t.value(v[0]).clone();
                let target = Tensor::new([3, 4], x.data()[12..].to_vec())?;
                let weights = Tensor::from_fn([3, 4], |i| 0.5 + (i % 3) as f64);
                let p = t.slice(v[0], 0, 0, 1)?;
                let p = t.reshape(p, [3, 4])?;
                t.bce(p, &target, Some(&weights))
            },
        },
        Case {
            name: "soft_dice",
            inputs: vec![pt],
            f: |t, v| {
                let x = t.value(v[0]).clone();
                let target = Tensor::new([3, 4], x.data()[12..].to_vec())?;
                let p = t.slice(v[0], 0, 0, 1)?;
                let p = t.reshape(p, [3, 4])?;
                t.soft_dice(p, &target, 1.0)
            },
        },
    ]
}

/// Runs every primitive check at `points` random points; reports the worst
/// relative error per primitive. Only the first input of the `bce` and
/// `soft_dice` cases (probabilities) is perturbed, targets ride along as data.
pub fn check_primitives(points: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: Vec<CheckResult> = Vec::new();
    for _ in 0..points {
        for case in cases(&mut rng) {
            let report = if matches!(case.name, "bce" | "soft_dice") {
                check_probability_case(&case)?
            } else {
                grad_check(case.f, &case.inputs, 1e-5)?.max_rel_err
            };
            match worst.iter_mut().find(|c| c.name == case.name) {
                Some(c) => c.max_rel_err = c.max_rel_err.max(report),
                None => worst.push(CheckResult::new(case.name, report, 1e-5)),
            }
        }
    }
    Ok(worst)
}

/// Checks only the probability half of a packed `[2, 3, 4]` (probabilities, targets) input.
fn check_probability_case(case: &Case) -> Result<f64> {
    let full = &case.inputs[0];
    let (p, t) = full.data().split_at(12);
    let p = Tensor::new([1, 3, 4], p.to_vec())?;
    let t = t.to_vec();
    let f = case.f;
    let wrapped = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let tv = tape.constant(Tensor::new([1, 3, 4], t.clone())?)?;
        let packed = tape.concat(&[v[0], tv], 0)?;
        f(tape, &[packed])
    };
    Ok(grad_check(wrapped, &[p], 1e-5)?.max_rel_err)
}

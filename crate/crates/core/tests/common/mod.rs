//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use nucleiforge::align::{DomainLabel, DomainWeights};
use nucleiforge::data::LabelMap;
use nucleiforge::metrics::Mask;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn naive_counts(p: &Mask, g: &Mask) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut fneg, mut tn) = (0, 0, 0, 0);
    for i in 0..p.pixels.len() {
        match (p.pixels[i], g.pixels[i]) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fneg, tn)
}

pub fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn random_instances(rng: &mut ChaCha8Rng) -> LabelMap {
    let (h, w) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
    let mut m = LabelMap::zeros(h, w);
    for label in 1..=rng.gen_range(0..5u32) {
        let (bh, bw) = (rng.gen_range(1..=h), rng.gen_range(1..=w));
        let (y0, x0) = (rng.gen_range(0..=h - bh), rng.gen_range(0..=w - bw));
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                if rng.gen_bool(0.85) {
                    m.labels[y * w + x] = label;
                }
            }
        }
    }
    m
}

pub fn pixel_set(m: &LabelMap, l: u32) -> BTreeSet<usize> {
    (0..m.labels.len()).filter(|&i| m.labels[i] == l).collect()
}

pub fn instance_sets(m: &LabelMap) -> Vec<BTreeSet<usize>> {
    (1..=m.max_label()).map(|l| pixel_set(m, l)).filter(|s| !s.is_empty()).collect()
}

pub fn set_iou(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> (usize, usize) {
    let i = a.intersection(b).count();
    (i, a.len() + b.len() - i)
}

pub fn reference_aji(pred: &LabelMap, gt: &LabelMap) -> f64 {
    let (ps, gs) = (instance_sets(pred), instance_sets(gt));
    if ps.is_empty() && gs.is_empty() {
        return 1.0;
    }
    let mut used = vec![false; ps.len()];
    let (mut inter, mut union) = (0, 0);
    for g in &gs {
        let mut best: Option<(f64, usize)> = None;
        for (k, p) in ps.iter().enumerate() {
            let (i, u) = set_iou(p, g);
            if i > 0 && best.map_or(true, |(b, _)| i as f64 / (u as f64) > b) {
                best = Some((i as f64 / u as f64, k));
            }
        }
        match best {
            Some((_, k)) => {
                let (i, u) = set_iou(&ps[k], g);
                inter += i;
                union += u;
                used[k] = true;
            }
            None => union += g.len(),
        }
    }
    union += ps.iter().zip(&used).filter(|(_, &u)| !u).map(|(p, _)| p.len()).sum::<usize>();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn reference_panoptic(pred: &LabelMap, gt: &LabelMap) -> (f64, f64, f64) {
    let (ps, gs) = (instance_sets(pred), instance_sets(gt));
    if ps.is_empty() && gs.is_empty() {
        return (1.0, 1.0, 1.0);
    }
    let mut matched = Vec::new();
    for p in &ps {
        for g in &gs {
            let (i, u) = set_iou(p, g);
            if 2 * i > u {
                matched.push(i as f64 / u as f64);
            }
        }
    }
    let tp = matched.len() as f64;
    let dq = tp / (tp + 0.5 * (ps.len() as f64 - tp) + 0.5 * (gs.len() as f64 - tp));
    let sq = if matched.is_empty() { 0.0 } else { matched.iter().sum::<f64>() / tp };
    (dq, sq, dq * sq)
}

pub fn reference_boundary(m: &Mask) -> Vec<(i64, i64)> {
    let (h, w) = (m.height as i64, m.width as i64);
    let on = |y: i64, x: i64| y >= 0 && x >= 0 && y < h && x < w && m.pixels[(y * w + x) as usize];
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if on(y, x) && !(on(y - 1, x) && on(y + 1, x) && on(y, x - 1) && on(y, x + 1)) {
                out.push((y, x));
            }
        }
    }
    out
}

pub fn reference_hausdorff(a: &Mask, b: &Mask) -> Option<f64> {
    let (ba, bb) = (reference_boundary(a), reference_boundary(b));
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| {
        from.iter()
            .map(|&(y, x)| to.iter().map(|&(v, u)| (y - v).pow(2) + (x - u).pow(2)).min().unwrap())
            .max()
            .unwrap()
    };
    Some((directed(&ba, &bb).max(directed(&bb, &ba)) as f64).sqrt())
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let density = rng.gen_range(0.05..0.9);
    Mask::new(h, w, (0..h * w).map(|_| rng.gen_bool(density)).collect())
}

/// Weighted domain BCE summed term by term, probabilities clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn direct_domain_bce(probs: &[f64], labels: &[DomainLabel], w: DomainWeights) -> f64 {
    let n = probs.len();
    -(0..n)
        .map(|i| {
            let d = probs[i].clamp(1e-7, 1.0 - 1e-7);
            let y = if labels[i].is_primary { 1.0 } else { 0.0 };
            w.w_main * y * d.ln() + w.w_aux * (1.0 - y) * (1.0 - d).ln()
        })
        .sum::<f64>()
        / n as f64
}

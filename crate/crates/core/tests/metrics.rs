mod common;

use std::collections::BTreeSet;

use common::*;
use nucleiforge::data::LabelMap;
use nucleiforge::metrics::{
    aji, boundary, dice, evaluate_pair, extract_instances, hausdorff, miou, object_f1, panoptic, Mask, MetricSummary,
    Report,
};
use nucleiforge::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
    let mut px = vec![false; h * w];
    for &(y, x) in on {
        px[y * w + x] = true;
    }
    Mask::new(h, w, px)
}

fn block(h: usize, w: usize, y0: usize, x0: usize, bh: usize, bw: usize) -> Mask {
    let on: Vec<_> = (y0..y0 + bh).flat_map(|y| (x0..x0 + bw).map(move |x| (y, x))).collect();
    mask(h, w, &on)
}

fn labels(h: usize, w: usize, rows: &[&str]) -> LabelMap {
    assert_eq!(rows.len(), h);
    let v: Vec<u32> = rows.iter().flat_map(|r| r.bytes().map(|b| if b == b'.' { 0 } else { u32::from(b - b'0') })).collect();
    assert_eq!(v.len(), h * w);
    LabelMap::from_vec(h, w, v)
}

#[test]
fn dice_hand_examples() {
    let a = block(6, 6, 1, 1, 2, 2);
    let shifted = block(6, 6, 1, 2, 2, 2);
    assert_eq!(dice(&a, &a).unwrap(), 1.0);
    assert_eq!(dice(&a, &block(6, 6, 4, 4, 2, 2)).unwrap(), 0.0);
    assert_eq!(dice(&a, &shifted).unwrap(), 0.5);
    assert!(dice(&a, &block(5, 6, 0, 0, 1, 1)).is_err());
}

#[test]
fn miou_hand_examples() {
    let left = block(4, 4, 0, 0, 4, 2);
    let right = block(4, 4, 0, 2, 4, 2);
    assert_eq!(miou(&left, &left).unwrap(), 1.0);
    assert_eq!(miou(&left, &right).unwrap(), 0.0);
    // 8x8: P is a 4x4 block at (0,0), G a 4x4 block at (2,2).
    // Foreground: inter 4, union 28. Background: inter 64 - 28 = 36, union 60.
    let p = block(8, 8, 0, 0, 4, 4);
    let g = block(8, 8, 2, 2, 4, 4);
    let want = 0.5 * (4.0 / 28.0 + 36.0 / 60.0);
    assert!((miou(&p, &g).unwrap() - want).abs() < 1e-15);
}

#[test]
fn dice_and_miou_match_pixel_counting_on_every_three_by_three_pair() {
    let all: Vec<Mask> = (0u32..512).map(|bits| Mask::new(3, 3, (0..9).map(|i| bits >> i & 1 == 1).collect())).collect();
    for p in &all {
        for g in &all {
            let (tp, fp, fneg, tn) = naive_counts(p, g);
            assert_eq!(dice(p, g).unwrap(), ratio(2 * tp, 2 * tp + fp + fneg));
            let want = (ratio(tp, tp + fp + fneg) + ratio(tn, tn + fp + fneg)) / 2.0;
            assert_eq!(miou(p, g).unwrap(), want);
        }
    }
}

#[test]
fn object_f1_hand_examples() {
    let gt = labels(4, 6, &["11..22", "11..22", "......", "......"]);
    assert_eq!(object_f1(&gt, &gt, 0.5).unwrap(), 1.0);
    assert_eq!(object_f1(&LabelMap::zeros(4, 6), &gt, 0.5).unwrap(), 0.0);
    // Pred covers gt 1 plus a sliver: IoU 4/6 > 0.5, gt 2 missed.
    let pred = labels(4, 6, &["111...", "111...", "......", "......"]);
    assert!((object_f1(&pred, &gt, 0.5).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn panoptic_hand_examples() {
    let gt = labels(4, 6, &["11..22", "11..22", "......", "......"]);
    let same = panoptic(&gt, &gt).unwrap();
    assert_eq!((same.dq, same.sq, same.pq), (1.0, 1.0, 1.0));
    let apart = labels(4, 6, &["......", "......", "33..44", "33..44"]);
    let none = panoptic(&apart, &gt).unwrap();
    assert_eq!((none.dq, none.sq, none.pq), (0.0, 0.0, 0.0));
    let empty = panoptic(&LabelMap::zeros(3, 3), &LabelMap::zeros(3, 3)).unwrap();
    assert_eq!((empty.dq, empty.sq, empty.pq), (1.0, 1.0, 1.0));

    // One gt of area 5; pred 1 covers 4 of it plus nothing else: IoU 4/5.
    // Pred 2 is a stray false positive.
    let gt = labels(3, 6, &["11111.", "......", "......"]);
    let pred = labels(3, 6, &["1111..", "......", "...222"]);
    let p = panoptic(&pred, &gt).unwrap();
    assert!((p.dq - 1.0 / 1.5).abs() < 1e-15);
    assert!((p.sq - 0.8).abs() < 1e-15);
    assert!((p.pq - 0.8 / 1.5).abs() < 1e-15);
    assert_eq!(p.pq, p.dq * p.sq);
}

#[test]
fn aji_hand_examples() {
    let gt = labels(6, 6, &["11....", "11....", "......", "...222", "...222", "......"]);
    assert_eq!(aji(&gt, &gt).unwrap(), 1.0);
    assert_eq!(aji(&LabelMap::zeros(6, 6), &gt).unwrap(), 0.0);
    assert_eq!(aji(&LabelMap::zeros(6, 6), &LabelMap::zeros(6, 6)).unwrap(), 1.0);
    // gt1 (4 px) best matches pred1 (6 px, inter 4); gt2 (6 px) best matches
    // pred2 (3 px, inter 3). Sum inter 7, sum union 6 + 6 = 12.
    let pred = labels(6, 6, &["111...", "111...", "......", "...222", "......", "......"]);
    assert!((aji(&pred, &gt).unwrap() - 7.0 / 12.0).abs() < 1e-15);
}

#[test]
fn hausdorff_hand_examples() {
    let a = mask(6, 6, &[(0, 0)]);
    let b = mask(6, 6, &[(3, 4)]);
    assert_eq!(hausdorff(&a, &b).unwrap(), Some(5.0));
    assert_eq!(hausdorff(&b, &a).unwrap(), Some(5.0));
    assert_eq!(hausdorff(&a, &a).unwrap(), Some(0.0));
    assert_eq!(hausdorff(&a, &mask(6, 6, &[])).unwrap(), None);
}

#[test]
fn instance_extraction() {
    let zero = Tensor::zeros([1, 6, 6]);
    assert_eq!(extract_instances(&zero, 0.5).unwrap().max_label(), 0);
    let mut p = Tensor::zeros([1, 8, 8]);
    for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1), (5, 5), (5, 6), (6, 5), (6, 6), (3, 7)] {
        p.data_mut()[y * 8 + x] = 0.9;
    }
    let inst = extract_instances(&p, 0.5).unwrap();
    let found: BTreeSet<u32> = inst.labels.iter().copied().filter(|&l| l > 0).collect();
    assert_eq!(found, BTreeSet::from([1, 2]));
    // The isolated pixel is below the minimum instance area.
    assert_eq!(inst.get(3, 7), 0);
    let ones = Tensor::ones([1, 4, 4]);
    assert_eq!(extract_instances(&ones, 1.0 + 1e-9).unwrap().max_label(), 0);
}

#[test]
fn aji_and_panoptic_match_brute_force_references() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..200 {
        let gt = random_instances(&mut rng);
        let mut pred = random_instances(&mut rng);
        if pred.height != gt.height || pred.width != gt.width {
            pred = LabelMap::zeros(gt.height, gt.width);
            let other = random_instances(&mut rng);
            for y in 0..gt.height.min(other.height) {
                for x in 0..gt.width.min(other.width) {
                    pred.labels[y * gt.width + x] = other.get(y, x);
                }
            }
        }
        let got = aji(&pred, &gt).unwrap();
        assert!((got - reference_aji(&pred, &gt)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&got));
        let p = panoptic(&pred, &gt).unwrap();
        let (dq, sq, pq) = reference_panoptic(&pred, &gt);
        assert!((p.dq - dq).abs() < 1e-12 && (p.sq - sq).abs() < 1e-12 && (p.pq - pq).abs() < 1e-12);
        assert_eq!(p.pq, p.dq * p.sq);
    }
}

#[test]
fn hausdorff_matches_all_pairs_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..100 {
        let (h, w) = (rng.gen_range(1..24), rng.gen_range(1..24));
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        assert_eq!(hausdorff(&a, &b).unwrap(), reference_hausdorff(&a, &b));
        let on: Vec<bool> = reference_boundary(&a).iter().fold(vec![false; h * w], |mut v, &(y, x)| {
            v[y as usize * w + x as usize] = true;
            v
        });
        assert_eq!(boundary(&a), on);
    }
}

fn erode(m: &Mask) -> Mask {
    let b = boundary(m);
    Mask::new(m.height, m.width, m.pixels.iter().zip(&b).map(|(&p, &e)| p && !e).collect())
}

proptest! {
    #[test]
    fn identities_and_ranges(seed in any::<u64>(), h in 1usize..16, w in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_mask(&mut rng, h, w), random_mask(&mut rng, h, w));
        prop_assert_eq!(dice(&a, &a).unwrap(), 1.0);
        prop_assert_eq!(miou(&a, &a).unwrap(), 1.0);
        prop_assert!(hausdorff(&a, &a).unwrap().map_or(true, |d| d == 0.0));
        prop_assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
        for v in [dice(&a, &b).unwrap(), miou(&a, &b).unwrap()] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn eroding_a_correct_prediction_never_raises_dice(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = random_mask(&mut rng, 12, 12);
        let mut pred = gt.clone();
        let mut last = dice(&pred, &gt).unwrap();
        for _ in 0..4 {
            pred = erode(&pred);
            let d = dice(&pred, &gt).unwrap();
            prop_assert!(d <= last);
            last = d;
        }
    }
}

#[test]
fn perfect_prediction_scores_one_everywhere() {
    let gt = labels(6, 6, &["11....", "11..22", "....22", "......", "333...", "333..."]);
    let prob = Tensor::from_fn([1, 6, 6], |i| if gt.labels[i] > 0 { 1.0 } else { 0.0 });
    let m = evaluate_pair(&prob, &gt).unwrap();
    assert_eq!(m.semantic.dsc, 1.0);
    assert_eq!(m.semantic.miou, 1.0);
    assert_eq!(m.semantic.f1, 1.0);
    assert_eq!(m.semantic.hd, Some(0.0));
    assert_eq!((m.instance.aji, m.instance.dq, m.instance.sq, m.instance.pq), (1.0, 1.0, 1.0, 1.0));
}

#[test]
fn report_summary_uses_sample_std() {
    let s = MetricSummary::of([1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(s.n, 4);
}

#[test]
fn report_csv_has_a_row_per_image_and_a_summary() {
    let gt = labels(4, 4, &["11..", "11..", "....", "..22"]);
    let mut r = Report::default();
    for k in 0..3 {
        let prob = Tensor::from_fn([1, 4, 4], |i| if gt.labels[i] > 0 && i != k { 0.9 } else { 0.1 });
        r.push(format!("img{k}"), evaluate_pair(&prob, &gt).unwrap());
    }
    let csv = r.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3 + 1);
    assert!(lines[0].contains("dsc") && lines[0].contains("pq"));
    assert!(lines[4].contains('±'));
    assert_eq!(r.to_jsonl().lines().count(), 3);
}

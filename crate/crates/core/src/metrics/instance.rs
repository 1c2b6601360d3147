use super::check_same;
use crate::data::LabelMap;
use crate::error::Result;

/// Pairwise intersections between the labels of two maps. Index 0 of each
/// area vector is background.
#[derive(Clone, Debug)]
pub struct OverlapTable {
    pub pred_areas: Vec<usize>,
    pub gt_areas: Vec<usize>,
    /// `intersections[p][g]`
    pub intersections: Vec<Vec<usize>>,
}

impl OverlapTable {
    pub fn iou(&self, p: usize, g: usize) -> f64 {
        let i = self.intersections[p][g];
        let u = self.pred_areas[p] + self.gt_areas[g] - i;
        if u == 0 {
            0.0
        } else {
            i as f64 / u as f64
        }
    }
}

pub fn overlap_table(pred: &LabelMap, gt: &LabelMap) -> Result<OverlapTable> {
    check_same("instance overlap", (pred.height, pred.width), (gt.height, gt.width))?;
    let (np, ng) = (pred.max_label() as usize, gt.max_label() as usize);
    let mut intersections = vec![vec![0; ng + 1]; np + 1];
    for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
        intersections[p as usize][g as usize] += 1;
    }
    let mut pred_areas = vec![0; np + 1];
    let mut gt_areas = vec![0; ng + 1];
    for (p, row) in intersections.iter().enumerate() {
        for (g, &n) in row.iter().enumerate() {
            pred_areas[p] += n;
            gt_areas[g] += n;
        }
    }
    Ok(OverlapTable {
        pred_areas,
        gt_areas,
        intersections,
    })
}

/// Aggregated Jaccard index. Each ground-truth instance takes the predicted
/// instance of highest IoU (lowest label on ties); predictions never chosen
/// add their area to the union. Labels absent from a map (zero area) are
/// ignored.
pub fn aji(pred: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let t = overlap_table(pred, gt)?;
    let (np, ng) = (t.pred_areas.len() - 1, t.gt_areas.len() - 1);
    let mut used = vec![false; np + 1];
    let (mut inter, mut union) = (0usize, 0usize);
    let mut any_gt = false;
    for g in 1..=ng {
        if t.gt_areas[g] == 0 {
            continue;
        }
        any_gt = true;
        let mut best: Option<(f64, usize)> = None;
        for p in 1..=np {
            if t.intersections[p][g] == 0 {
                continue;
            }
            let iou = t.iou(p, g);
            if best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, p));
            }
        }
        match best {
            Some((_, p)) => {
                let i = t.intersections[p][g];
                inter += i;
                union += t.pred_areas[p] + t.gt_areas[g] - i;
                used[p] = true;
            }
            None => union += t.gt_areas[g],
        }
    }
    for p in 1..=np {
        if !used[p] {
            union += t.pred_areas[p];
        }
    }
    if !any_gt && union == 0 {
        return Ok(1.0);
    }
    Ok(if union == 0 { 0.0 } else { inter as f64 / union as f64 })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Panoptic {
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
}

/// Detection, segmentation and panoptic quality with IoU > 0.5 matching.
pub fn panoptic(pred: &LabelMap, gt: &LabelMap) -> Result<Panoptic> {
    let t = overlap_table(pred, gt)?;
    let np = t.pred_areas.iter().skip(1).filter(|&&a| a > 0).count();
    let ng = t.gt_areas.iter().skip(1).filter(|&&a| a > 0).count();
    let mut tp = 0usize;
    let mut iou_sum = 0.0;
    for p in 1..t.pred_areas.len() {
        for g in 1..t.gt_areas.len() {
            if t.intersections[p][g] == 0 {
                continue;
            }
            let iou = t.iou(p, g);
            if iou > 0.5 {
                tp += 1;
                iou_sum += iou;
            }
        }
    }
    if np == 0 && ng == 0 {
        return Ok(Panoptic {
            dq: 1.0,
            sq: 1.0,
            pq: 1.0,
        });
    }
    let (fp, fneg) = ((np - tp) as f64, (ng - tp) as f64);
    let dq = tp as f64 / (tp as f64 + 0.5 * fp + 0.5 * fneg);
    let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
    Ok(Panoptic { dq, sq, pq: dq * sq })
}

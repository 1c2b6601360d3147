use super::{check_same, instance::overlap_table, Mask};
use crate::data::LabelMap;
use crate::error::Result;

/// `2|P∩G| / (|P|+|G|)`, 1 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same("dice", (pred.height, pred.width), (gt.height, gt.width))?;
    let inter = pred.pixels.iter().zip(&gt.pixels).filter(|(&p, &g)| p && g).count();
    let total = pred.count() + gt.count();
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Mean of foreground and background IoU; a class absent from both has IoU 1.
pub fn miou(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_same("miou", (pred.height, pred.width), (gt.height, gt.width))?;
    let mut counts = [[0usize; 2]; 2];
    for (&p, &g) in pred.pixels.iter().zip(&gt.pixels) {
        counts[p as usize][g as usize] += 1;
    }
    let iou = |c: usize| {
        let inter = counts[c][c];
        let union = counts[c][0] + counts[c][1] + counts[0][c] + counts[1][c] - inter;
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    };
    Ok(0.5 * (iou(0) + iou(1)))
}

/// Object-level F1: greedy one-to-one matching by descending IoU, pairs
/// above `iou_thresh` count as true positives. 1 when both maps are empty.
pub fn object_f1(pred: &LabelMap, gt: &LabelMap, iou_thresh: f64) -> Result<f64> {
    let table = overlap_table(pred, gt)?;
    let (np, ng) = (table.pred_areas.len() - 1, table.gt_areas.len() - 1);
    if np == 0 && ng == 0 {
        return Ok(1.0);
    }
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for p in 1..=np {
        for g in 1..=ng {
            let iou = table.iou(p, g);
            if iou > iou_thresh {
                pairs.push((iou, p, g));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let (mut used_p, mut used_g) = (vec![false; np + 1], vec![false; ng + 1]);
    let mut tp = 0;
    for (_, p, g) in pairs {
        if !used_p[p] && !used_g[g] {
            used_p[p] = true;
            used_g[g] = true;
            tp += 1;
        }
    }
    let (fp, fneg) = (np - tp, ng - tp);
    Ok(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64)
}

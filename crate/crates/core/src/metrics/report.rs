use std::path::Path;

use serde::Serialize;

use super::{aji, dice, extract_instances, hausdorff, miou, object_f1, panoptic, Mask};
use crate::data::LabelMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SemanticReport {
    pub dsc: f64,
    pub miou: f64,
    pub f1: f64,
    /// `None` when undefined (an empty mask on either side).
    pub hd: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct InstanceReport {
    pub aji: f64,
    pub dq: f64,
    pub sq: f64,
    pub pq: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub semantic: SemanticReport,
    pub instance: InstanceReport,
}

/// Every metric for one probability map against its ground truth.
pub fn evaluate_pair(prob: &Tensor<f64>, gt: &LabelMap) -> Result<ImageMetrics> {
    let pred_mask = Mask::from_tensor(prob, 0.5)?;
    let gt_mask = Mask::from_labels(gt);
    let pred_inst = extract_instances(prob, 0.5)?;
    let pan = panoptic(&pred_inst, gt)?;
    Ok(ImageMetrics {
        semantic: SemanticReport {
            dsc: dice(&pred_mask, &gt_mask)?,
            miou: miou(&pred_mask, &gt_mask)?,
            f1: object_f1(&pred_inst, gt, 0.5)?,
            hd: hausdorff(&pred_mask, &gt_mask)?,
        },
        instance: InstanceReport {
            aji: aji(&pred_inst, gt)?,
            dq: pan.dq,
            sq: pan.sq,
            pq: pan.pq,
        },
    })
}

/// Mean and sample standard deviation of one column; `n` counts defined values.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        let n = v.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = v.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }

    pub fn display(&self) -> String {
        format!("{:.4}±{:.4}", self.mean, self.std)
    }
}

pub const COLUMNS: [&str; 8] = ["dsc", "miou", "f1", "hd", "aji", "dq", "sq", "pq"];

/// Per-image metrics with their names, in evaluation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub rows: Vec<(String, ImageMetrics)>,
}

impl ImageMetrics {
    /// Values in `COLUMNS` order.
    pub fn values(&self) -> [Option<f64>; 8] {
        let (s, i) = (&self.semantic, &self.instance);
        [Some(s.dsc), Some(s.miou), Some(s.f1), s.hd, Some(i.aji), Some(i.dq), Some(i.sq), Some(i.pq)]
    }
}

#[derive(Serialize)]
struct JsonRow<'a> {
    image: &'a str,
    #[serde(flatten)]
    semantic: &'a SemanticReport,
    #[serde(flatten)]
    instance: &'a InstanceReport,
}

impl Report {
    pub fn push(&mut self, name: impl Into<String>, m: ImageMetrics) {
        self.rows.push((name.into(), m));
    }

    pub fn column(&self, index: usize) -> MetricSummary {
        MetricSummary::of(self.rows.iter().filter_map(|(_, m)| m.values()[index]))
    }

    pub fn summary(&self) -> Vec<(&'static str, MetricSummary)> {
        COLUMNS.iter().enumerate().map(|(i, &c)| (c, self.column(i))).collect()
    }

    /// Mean semantic metrics; HD averages the images where it is defined.
    pub fn semantic(&self) -> SemanticReport {
        let hd = self.column(3);
        SemanticReport {
            dsc: self.column(0).mean,
            miou: self.column(1).mean,
            f1: self.column(2).mean,
            hd: (hd.n > 0).then_some(hd.mean),
        }
    }

    pub fn instance(&self) -> InstanceReport {
        InstanceReport {
            aji: self.column(4).mean,
            dq: self.column(5).mean,
            sq: self.column(6).mean,
            pq: self.column(7).mean,
        }
    }

    /// One row per image plus a final `mean±std` row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Format {
            path: "<report>".into(),
            msg: e.to_string(),
        };
        let mut header = vec!["image"];
        header.extend(COLUMNS);
        w.write_record(&header).map_err(csv_err)?;
        for (name, m) in &self.rows {
            let mut rec = vec![name.clone()];
            rec.extend(m.values().iter().map(|v| v.map_or("undefined".into(), |x| format!("{x:.6}"))));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let mut rec = vec!["mean±std".to_string()];
        rec.extend(self.summary().iter().map(|(_, s)| s.display()));
        w.write_record(&rec).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| csv_err(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    /// One JSON object per image; undefined HD is `null`.
    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|(name, m)| {
                let row = JsonRow {
                    image: name,
                    semantic: &m.semantic,
                    instance: &m.instance,
                };
                serde_json::to_string(&row).expect("metrics serialise") + "\n"
            })
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>, jsonl: bool) -> Result<()> {
        let path = path.as_ref();
        let text = if jsonl { self.to_jsonl() } else { self.to_csv()? };
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

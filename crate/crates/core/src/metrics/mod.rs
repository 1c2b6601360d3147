//! Semantic and instance segmentation metrics.

mod hausdorff;
mod instance;
mod report;
mod semantic;

use crate::data::{connected_components, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use hausdorff::{boundary, hausdorff};
pub use instance::{aji, overlap_table, panoptic, OverlapTable, Panoptic};
pub use report::{evaluate_pair, ImageMetrics, InstanceReport, MetricSummary, Report, SemanticReport};
pub use semantic::{dice, miou, object_f1};

/// Binary mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, pixels: Vec<bool>) -> Self {
        assert_eq!(pixels.len(), height * width, "mask buffer does not match {height}x{width}");
        Self { height, width, pixels }
    }

    /// Pixels of a `1 x H x W` (or `H x W`) tensor at or above `threshold`.
    pub fn from_tensor(t: &Tensor<f64>, threshold: f64) -> Result<Self> {
        let s = t.shape();
        let (h, w) = match s {
            [1, h, w] | [h, w] => (*h, *w),
            _ => return Err(Error::shape("mask", s, &[1, 0, 0])),
        };
        Ok(Self::new(h, w, t.data().iter().map(|&v| v >= threshold).collect()))
    }

    pub fn from_labels(l: &LabelMap) -> Self {
        Self::new(l.height, l.width, l.foreground())
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p).count()
    }
}

pub(crate) fn check_same(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, &[a.0, a.1], &[b.0, b.1]));
    }
    Ok(())
}

/// Components of at least this many pixels survive instance extraction.
pub const MIN_INSTANCE_AREA: usize = 4;

/// Threshold, 8-connected components, drop components under 4 pixels.
pub fn extract_instances(prob: &Tensor<f64>, threshold: f64) -> Result<LabelMap> {
    let m = Mask::from_tensor(prob, threshold)?;
    Ok(connected_components(&m.pixels, m.height, m.width, MIN_INSTANCE_AREA))
}

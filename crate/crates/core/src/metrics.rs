//! Per-class IoU, seen/unseen mIoU and their harmonic mean.

use serde::{Deserialize, Serialize};

use crate::error::{param, shape, Result};
use crate::inference::LabelMap;

pub const DEFAULT_IGNORE_INDEX: u32 = 255;

/// `gt × pred` pixel counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, ignore_index: u32) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(shape(format!(
                "prediction is {}x{}, ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == ignore_index {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= c || p >= c {
                return Err(param(format!(
                    "label out of range for {c} classes (pred {p}, gt {g})"
                )));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(shape("confusion matrices with different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both prediction and
    /// ground truth.
    pub fn iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let tp = self.count(k, k);
                let gt_total: u64 = (0..c).map(|p| self.count(k, p)).sum();
                let pred_total: u64 = (0..c).map(|g| self.count(g, k)).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

pub fn iou_per_class(
    pred: &LabelMap,
    gt: &LabelMap,
    num_classes: usize,
    ignore_index: u32,
) -> Result<Vec<Option<f64>>> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt, ignore_index)?;
    Ok(cm.iou())
}

fn mean_present(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Means over present seen and present unseen classes; `None` marks a
/// partition without present classes.
pub fn partitioned_miou(per_class: &[Option<f64>], seen_mask: &[bool]) -> Result<(Option<f64>, Option<f64>)> {
    if per_class.len() != seen_mask.len() {
        return Err(shape(format!(
            "{} IoUs but {} seen flags",
            per_class.len(),
            seen_mask.len()
        )));
    }
    let pick = |want: bool| {
        mean_present(
            per_class
                .iter()
                .zip(seen_mask)
                .filter(|(_, &s)| s == want)
                .filter_map(|(v, _)| *v),
        )
    };
    Ok((pick(true), pick(false)))
}

/// Harmonic mean of seen and unseen mIoU; 0 when either is 0.
pub fn hiou(miou_seen: f64, miou_unseen: f64) -> f64 {
    let s = miou_seen + miou_unseen;
    if miou_seen <= 0.0 || miou_unseen <= 0.0 || s <= 0.0 {
        return 0.0;
    }
    2.0 * miou_seen * miou_unseen / s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    /// `null` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou_seen: Option<f64>,
    pub miou_unseen: Option<f64>,
    /// Defined only when both partitions are.
    pub hiou: Option<f64>,
}

impl IoUReport {
    pub fn from_confusion(cm: &ConfusionMatrix, seen_mask: &[bool]) -> Result<Self> {
        let per_class_iou = cm.iou();
        let (miou_seen, miou_unseen) = partitioned_miou(&per_class_iou, seen_mask)?;
        let h = match (miou_seen, miou_unseen) {
            (Some(s), Some(u)) => Some(hiou(s, u)),
            _ => None,
        };
        Ok(Self {
            per_class_iou,
            miou_seen,
            miou_unseen,
            hiou: h,
        })
    }

    /// `class,iou` lines with an empty field for absent classes.
    pub fn to_csv(&self, class_names: Option<&[String]>) -> String {
        let mut out = String::from("class,iou\n");
        for (i, v) in self.per_class_iou.iter().enumerate() {
            let name = class_names
                .and_then(|n| n.get(i).cloned())
                .unwrap_or_else(|| i.to_string());
            match v {
                Some(v) => out.push_str(&format!("{name},{v}\n")),
                None => out.push_str(&format!("{name},\n")),
            }
        }
        out
    }
}

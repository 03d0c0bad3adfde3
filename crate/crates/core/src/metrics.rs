//! Classification and segmentation metrics.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `classes × classes` counts indexed by (truth, prediction).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        for c in [truth, pred] {
            if c >= self.classes {
                return Err(Error::Index {
                    op: "confusion matrix",
                    index: c,
                    len: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn add_all(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::dims(
                "confusion matrix",
                &[truth.len()],
                &[pred.len()],
            ));
        }
        truth
            .iter()
            .zip(pred)
            .try_for_each(|(&t, &p)| self.add(t, p))
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn overall_accuracy(&self) -> f64 {
        let correct: u64 = (0..self.classes).map(|c| self.count(c, c)).sum();
        match self.total() {
            0 => 0.0,
            t => correct as f64 / t as f64,
        }
    }

    /// `TP / (TP + FP + FN)`, or `None` when the class never occurs in
    /// either truth or prediction.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let tp = self.count(c, c);
        let fn_: u64 = (0..self.classes).map(|p| self.count(c, p)).sum::<u64>() - tp;
        let fp: u64 = (0..self.classes).map(|t| self.count(t, c)).sum::<u64>() - tp;
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes).map(|c| self.iou(c)).collect()
    }

    /// Mean IoU over classes that occur at all.
    pub fn mean_iou(&self) -> f64 {
        let ious: Vec<f64> = (0..self.classes).filter_map(|c| self.iou(c)).collect();
        if ious.is_empty() {
            0.0
        } else {
            ious.iter().sum::<f64>() / ious.len() as f64
        }
    }
}

/// Mean IoU of one cloud over the classes present in its truth or
/// prediction; classes absent from both are skipped.
pub fn cloud_miou(truth: &[usize], pred: &[usize], classes: usize) -> Result<f64> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add_all(truth, pred)?;
    Ok(cm.mean_iou())
}

/// Segmentation and classification summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean of the per-class IoUs.
    pub class_miou: f64,
    /// Mean of the per-cloud IoU means (segmentation only).
    pub instance_miou: Option<f64>,
}

/// Metrics for whole-cloud predictions.
pub fn classification_metrics(truth: &[usize], pred: &[usize], classes: usize) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(classes);
    cm.add_all(truth, pred)?;
    Ok(Metrics {
        overall_accuracy: cm.overall_accuracy(),
        per_class_iou: cm.per_class_iou(),
        class_miou: cm.mean_iou(),
        instance_miou: None,
    })
}

/// Metrics for per-point predictions, one `(truth, prediction)` pair per cloud.
pub fn segmentation_metrics(
    clouds: &[(Vec<usize>, Vec<usize>)],
    classes: usize,
) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(classes);
    let mut inst = 0.0;
    for (t, p) in clouds {
        cm.add_all(t, p)?;
        inst += cloud_miou(t, p, classes)?;
    }
    Ok(Metrics {
        overall_accuracy: cm.overall_accuracy(),
        per_class_iou: cm.per_class_iou(),
        class_miou: cm.mean_iou(),
        instance_miou: Some(if clouds.is_empty() {
            0.0
        } else {
            inst / clouds.len() as f64
        }),
    })
}

//! Segmentation metrics: per-image per-class confusion counts, the four
//! class-and-image-averaged metrics (mIoU, mPrecision, mRecall, mF1), and a
//! forgetting score over historical drift phases.
//!
//! Averaging convention: a per-image per-class term is included only when
//! its own denominator is positive; a class entirely absent from every
//! image is excluded from the class average. mF1 is built from the
//! class-level mean precision/recall, not from per-image F1 values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// TP/FP/FN counts for one image, indexed by class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

/// Per-image confusion counts for a whole evaluation set.
#[derive(Debug, Clone, Default)]
pub struct ConfusionMatrix {
    pub images: Vec<ImageCounts>,
    pub class_count: usize,
}

impl ConfusionMatrix {
    pub fn new(class_count: usize) -> Self {
        ConfusionMatrix {
            images: Vec::new(),
            class_count,
        }
    }

    pub fn push(&mut self, counts: ImageCounts) {
        debug_assert_eq!(counts.tp.len(), self.class_count);
        self.images.push(counts);
    }

    /// Merges another matrix; accumulation is order-independent up to the
    /// image ordering, which the metrics do not depend on.
    pub fn merge(&mut self, other: ConfusionMatrix) {
        debug_assert_eq!(self.class_count, other.class_count);
        self.images.extend(other.images);
    }
}

/// Exact per-class TP/FP/FN for one image.
pub fn confusion_from(pred: &[usize], truth: &[usize], class_count: usize) -> Result<ImageCounts> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = vec![0u64; class_count];
    let mut fp = vec![0u64; class_count];
    let mut fn_ = vec![0u64; class_count];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= class_count || t >= class_count {
            return Err(Error::InvalidLabel(format!(
                "label out of range for {class_count} classes (pred={p}, true={t})"
            )));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    Ok(ImageCounts { tp, fp, fn_ })
}

/// The four averaged metrics, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBundle {
    pub miou: f64,
    pub mf1: f64,
    pub mprecision: f64,
    pub mrecall: f64,
}

fn mean_over_defined(terms: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = terms.iter().flatten().copied().collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Computes the metric bundle from per-image confusion counts.
pub fn metric_bundle(cm: &ConfusionMatrix) -> Result<MetricBundle> {
    if cm.images.is_empty() {
        return Err(Error::InvalidInput("confusion matrix holds no images".into()));
    }
    let k = cm.class_count;

    let mut iou_k = Vec::with_capacity(k);
    let mut pre_k = Vec::with_capacity(k);
    let mut rec_k = Vec::with_capacity(k);
    for class in 0..k {
        let mut ious = Vec::new();
        let mut pres = Vec::new();
        let mut recs = Vec::new();
        for img in &cm.images {
            let (tp, fp, fn_) = (
                img.tp[class] as f64,
                img.fp[class] as f64,
                img.fn_[class] as f64,
            );
            if tp + fp + fn_ > 0.0 {
                ious.push(Some(tp / (tp + fp + fn_)));
            }
            if tp + fp > 0.0 {
                pres.push(Some(tp / (tp + fp)));
            }
            if tp + fn_ > 0.0 {
                recs.push(Some(tp / (tp + fn_)));
            }
        }
        iou_k.push(mean_over_defined(&ious));
        pre_k.push(mean_over_defined(&pres));
        rec_k.push(mean_over_defined(&recs));
    }

    let f1_k: Vec<Option<f64>> = pre_k
        .iter()
        .zip(&rec_k)
        .map(|(p, r)| match (p, r) {
            (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
            (Some(_), Some(_)) => Some(0.0),
            _ => None,
        })
        .collect();

    let fallback = |name: &str, v: Option<f64>| {
        v.ok_or_else(|| Error::InvalidInput(format!("no defined terms for {name}")))
    };
    Ok(MetricBundle {
        miou: fallback("mIoU", mean_over_defined(&iou_k))?,
        mf1: fallback("mF1", mean_over_defined(&f1_k))?,
        mprecision: fallback("mPrecision", mean_over_defined(&pre_k))?,
        mrecall: fallback("mRecall", mean_over_defined(&rec_k))?,
    })
}

/// Mean, over past phases, of (best mIoU ever achieved on that phase's eval
/// set minus the final mIoU on it). Positive values indicate forgetting.
///
/// `histories[i]` is the mIoU trajectory recorded for past phase `i`.
pub fn forgetting_score(histories: &[Vec<f64>]) -> Result<f64> {
    if histories.is_empty() {
        return Err(Error::NotApplicable(
            "forgetting needs at least one completed past phase".into(),
        ));
    }
    let mut total = 0.0;
    for (i, history) in histories.iter().enumerate() {
        if history.is_empty() {
            return Err(Error::InvalidInput(format!("empty history for phase {i}")));
        }
        let best = history.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let last = *history.last().unwrap();
        total += best - last;
    }
    Ok(total / histories.len() as f64)
}

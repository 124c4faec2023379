//! Segmentation and multi-label evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pixel counts with rows indexed by ground truth and columns by prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one map pair. Pixels whose ground truth is `ignore_index` are skipped.
    pub fn accumulate(&mut self, pred: &[u16], gt: &[u16], ignore_index: u16) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_index {
                continue;
            }
            for id in [g, p] {
                if id as usize >= k {
                    return Err(Error::ClassOutOfRange {
                        id: id as usize,
                        num_classes: k,
                    });
                }
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    /// Sums counts from a disjoint shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::Shape(format!(
                "cannot merge confusion matrices over {} and {} classes",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `IoU_k`, or `None` for classes with an empty union.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::NoValidClass);
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

pub fn miou(pred: &[u16], gt: &[u16], num_classes: usize, ignore_index: u16) -> Result<MiouResult> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(pred, gt, ignore_index)?;
    Ok(MiouResult {
        miou: cm.miou()?,
        per_class_iou: cm.per_class_iou(),
        confusion: cm,
    })
}

/// Average precision of one class: the mean, over positive samples, of the
/// precision among samples ranked at or above it. Ranking is by descending
/// score with ties going to the lower sample index.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

/// Mean AP over classes that have at least one positive. `scores` and
/// `targets` are row-major `[N, K]`.
pub fn mean_average_precision(scores: &[f64], targets: &[bool], num_classes: usize) -> Result<f64> {
    if num_classes == 0 || scores.len() != targets.len() || scores.len() % num_classes != 0 {
        return Err(Error::Shape(format!(
            "{} scores and {} targets over {num_classes} classes",
            scores.len(),
            targets.len()
        )));
    }
    let n = scores.len() / num_classes;
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let s: Vec<f64> = (0..n).map(|i| scores[i * num_classes + c]).collect();
        let t: Vec<bool> = (0..n).map(|i| targets[i * num_classes + c]).collect();
        if let Some(ap) = average_precision(&s, &t) {
            aps.push(ap);
        }
    }
    if aps.is_empty() {
        return Err(Error::NoPositives);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

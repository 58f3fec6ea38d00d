//! Threshold-free ranking metrics and confidence diagnostics.
//!
//! `sample_map` ranks classes within each example; `class_cmap` ranks
//! examples within each class (classes below a positive-count floor are
//! excluded from the mean); `top1` is plain single-label accuracy. All raw
//! score ties break deterministically by ascending class index (mAP) or
//! ascending example index (cmAP), ranks are 1-based, and both mean average
//! precisions are invariant under strictly monotone score transforms.

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use crate::TaskMode;
use serde::{Deserialize, Serialize};

/// Scores with binary ground-truth labels.
#[derive(Debug, Clone)]
pub struct EvalBatch {
    scores: DenseMatrix,
    labels: DenseMatrix,
    task: TaskMode,
}

impl EvalBatch {
    /// `scores` may be logits or probabilities (rank metrics do not care).
    /// Labels must be 0/1; single-label rows carry exactly one 1.
    pub fn new(scores: DenseMatrix, labels: DenseMatrix, task: TaskMode) -> Result<Self> {
        if scores.rows() != labels.rows() || scores.cols() != labels.cols() {
            return Err(Error::shape(format!(
                "scores are {}x{}, labels are {}x{}",
                scores.rows(),
                scores.cols(),
                labels.rows(),
                labels.cols()
            )));
        }
        if scores.rows() == 0 || scores.cols() == 0 {
            return Err(Error::data("evaluation batch is empty"));
        }
        scores.check_finite("scores")?;
        for (i, row) in labels.iter_rows().enumerate() {
            let mut ones = 0usize;
            for &v in row {
                if v == 1.0 {
                    ones += 1;
                } else if v != 0.0 {
                    return Err(Error::data(format!("labels row {i} contains non-binary value {v}")));
                }
            }
            if task == TaskMode::SingleLabel && ones != 1 {
                return Err(Error::data(format!(
                    "single-label row {i} has {ones} positives, expected exactly 1"
                )));
            }
        }
        Ok(EvalBatch {
            scores,
            labels,
            task,
        })
    }

    pub fn scores(&self) -> &DenseMatrix {
        &self.scores
    }

    pub fn labels(&self) -> &DenseMatrix {
        &self.labels
    }

    pub fn task(&self) -> TaskMode {
        self.task
    }

    pub fn len(&self) -> usize {
        self.scores.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.rows() == 0
    }

    pub fn class_count(&self) -> usize {
        self.scores.cols()
    }
}

/// Average precision of one ranking: `order` lists item ids best-first,
/// `positive(id)` marks ground truth. Returns `None` without positives.
fn average_precision(order: &[usize], positive: impl Fn(usize) -> bool) -> Option<f64> {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (idx, &item) in order.iter().enumerate() {
        if positive(item) {
            hits += 1;
            sum += hits as f64 / (idx + 1) as f64;
        }
    }
    if hits == 0 {
        None
    } else {
        Some(sum / hits as f64)
    }
}

/// Sample-wise mean average precision: classes ranked within each example,
/// averaged over that example's positives, then over examples. Examples with
/// no positive labels are skipped; having none at all is an error.
pub fn sample_map(batch: &EvalBatch) -> Result<f64> {
    let c = batch.class_count();
    let mut order: Vec<usize> = Vec::with_capacity(c);
    let mut total = 0.0;
    let mut contributing = 0usize;
    for i in 0..batch.len() {
        let scores = batch.scores.row(i);
        order.clear();
        order.extend(0..c);
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        if let Some(ap) = average_precision(&order, |cls| batch.labels.get(i, cls) == 1.0) {
            total += ap;
            contributing += 1;
        }
    }
    if contributing == 0 {
        return Err(Error::data("mean average precision undefined: no example has a positive label"));
    }
    Ok(total / contributing as f64)
}

/// Class-wise mean average precision: examples ranked within each class.
/// Classes with fewer than `min_positives` positives (or none at all) are
/// excluded from the unweighted mean; no qualifying class is an error.
pub fn class_cmap(batch: &EvalBatch, min_positives: usize) -> Result<f64> {
    let n = batch.len();
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let mut total = 0.0;
    let mut qualifying = 0usize;
    for cls in 0..batch.class_count() {
        let positives = (0..n).filter(|&i| batch.labels.get(i, cls) == 1.0).count();
        if positives == 0 || positives < min_positives {
            continue;
        }
        order.clear();
        order.extend(0..n);
        order.sort_by(|&a, &b| {
            batch
                .scores
                .get(b, cls)
                .total_cmp(&batch.scores.get(a, cls))
                .then(a.cmp(&b))
        });
        let ap = average_precision(&order, |i| batch.labels.get(i, cls) == 1.0)
            .expect("positives > 0 guarantees a defined AP");
        total += ap;
        qualifying += 1;
    }
    if qualifying == 0 {
        return Err(Error::data(format!(
            "class-wise mAP undefined: no class reaches {min_positives} positives"
        )));
    }
    Ok(total / qualifying as f64)
}

/// Number of classes entering the cmAP mean under the positive-count floor.
pub fn qualifying_classes(batch: &EvalBatch, min_positives: usize) -> usize {
    (0..batch.class_count())
        .filter(|&cls| {
            let p = (0..batch.len())
                .filter(|&i| batch.labels.get(i, cls) == 1.0)
                .count();
            p > 0 && p >= min_positives
        })
        .count()
}

/// Single-label top-1 accuracy; argmax ties break to the lowest class index.
pub fn top1(batch: &EvalBatch) -> Result<f64> {
    if batch.task != TaskMode::SingleLabel {
        return Err(Error::config("top-1 accuracy requires a single-label batch"));
    }
    let mut correct = 0usize;
    for i in 0..batch.len() {
        let row = batch.scores.row(i);
        let mut best = 0usize;
        for j in 1..row.len() {
            if row[j] > row[best] {
                best = j;
            }
        }
        if batch.labels.get(i, best) == 1.0 {
            correct += 1;
        }
    }
    Ok(correct as f64 / batch.len() as f64)
}

/// Distribution summary of one class's assigned probabilities.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassConfidence {
    pub class: usize,
    pub mean: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    /// Mean over the class's ground-truth-positive samples, when labels were
    /// supplied and the class has any.
    pub mean_over_positives: Option<f64>,
}

/// Per-class probability summaries plus the scalar mean max confidence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceProfile {
    pub per_class: Vec<ClassConfidence>,
    /// Mean over samples of the maximum class probability.
    pub mean_max_confidence: f64,
}

/// Linear-interpolation quantile of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Summarize assigned probabilities per class. `probs` must lie in `[0, 1]`;
/// `labels`, when given, adds the positives-only means.
pub fn confidence_profile(
    probs: &DenseMatrix,
    labels: Option<&DenseMatrix>,
) -> Result<ConfidenceProfile> {
    if probs.rows() == 0 || probs.cols() == 0 {
        return Err(Error::data("confidence profile of an empty matrix"));
    }
    if let Some(v) = probs.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::data(format!("probability {v} outside [0, 1]")));
    }
    if let Some(l) = labels {
        if l.rows() != probs.rows() || l.cols() != probs.cols() {
            return Err(Error::shape(format!(
                "labels are {}x{}, probabilities are {}x{}",
                l.rows(),
                l.cols(),
                probs.rows(),
                probs.cols()
            )));
        }
    }
    let (n, c) = (probs.rows(), probs.cols());
    let mut per_class = Vec::with_capacity(c);
    for cls in 0..c {
        let mut col: Vec<f64> = (0..n).map(|i| probs.get(i, cls)).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        col.sort_by(f64::total_cmp);
        let mean_over_positives = labels.and_then(|l| {
            let pos: Vec<f64> = (0..n)
                .filter(|&i| l.get(i, cls) == 1.0)
                .map(|i| probs.get(i, cls))
                .collect();
            if pos.is_empty() {
                None
            } else {
                Some(pos.iter().sum::<f64>() / pos.len() as f64)
            }
        });
        per_class.push(ClassConfidence {
            class: cls,
            mean,
            q25: quantile(&col, 0.25),
            median: quantile(&col, 0.5),
            q75: quantile(&col, 0.75),
            mean_over_positives,
        });
    }
    let mean_max = probs
        .iter_rows()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / n as f64;
    Ok(ConfidenceProfile {
        per_class,
        mean_max_confidence: mean_max,
    })
}

/// One evaluation snapshot, serialized into reports and results rows.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub map: f64,
    pub cmap: f64,
    /// Single-label only.
    pub top1: Option<f64>,
    pub mean_max_conf: f64,
    pub n_examples: usize,
    pub n_qualifying_classes: usize,
}

impl MetricReport {
    /// Evaluate every metric on one batch. `probs` feeds the confidence
    /// scalar and must be the probability form of `batch.scores`.
    pub fn compute(batch: &EvalBatch, probs: &DenseMatrix, min_positives: usize) -> Result<Self> {
        let map = sample_map(batch)?;
        let cmap = class_cmap(batch, min_positives)?;
        let top1 = match batch.task() {
            TaskMode::SingleLabel => Some(top1(batch)?),
            TaskMode::MultiLabel => None,
        };
        let profile = confidence_profile(probs, Some(batch.labels()))?;
        Ok(MetricReport {
            map,
            cmap,
            top1,
            mean_max_conf: profile.mean_max_confidence,
            n_examples: batch.len(),
            n_qualifying_classes: qualifying_classes(batch, min_positives),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization cannot fail")
    }
}

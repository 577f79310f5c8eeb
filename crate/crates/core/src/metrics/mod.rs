//! Evaluation metrics: Top-k, mean class accuracy, many-hot precision/recall,
//! gaze angle error and saliency AUC.

mod report;

pub use report::{
    classification_metrics, coordinate_metrics, ClassificationMetrics, CoordinateEval, CoordinateMetrics, ManyHotSpec,
    MetricsReport, TaskMetrics, TaskReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_FOV_DEG: f64 = 60.0;
pub const DEFAULT_MANY_HOT_THRESHOLD: usize = 100;

fn check_rows(logits: &[f64], num_classes: usize, labels: &[usize]) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("no samples".into()));
    }
    if num_classes == 0 || logits.len() != labels.len() * num_classes {
        return Err(Error::dim("metrics", format!("{} logits for {} rows of {num_classes}", logits.len(), labels.len())));
    }
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
        return Err(Error::Index(format!("label {l} of sample {i} outside [0, {num_classes})")));
    }
    Ok(())
}

/// Position of `label` in the descending ranking of `row`, ties ranked by class id.
pub fn rank_of(row: &[f64], label: usize) -> usize {
    let s = row[label];
    row.iter().enumerate().filter(|&(c, &v)| v > s || (v == s && c < label)).count()
}

/// Class with the highest score, lowest id on ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (c, &v)| if v > row[best] { c } else { best })
}

/// Fraction of rows whose label ranks among the `k` highest logits.
pub fn topk_accuracy(logits: &[f64], num_classes: usize, labels: &[usize], k: usize) -> Result<f64> {
    check_rows(logits, num_classes, labels)?;
    if k == 0 || k > num_classes {
        return Err(Error::Contract(format!("k = {k} outside [1, {num_classes}]")));
    }
    let hits = labels.iter().enumerate().filter(|&(i, &l)| rank_of(&logits[i * num_classes..(i + 1) * num_classes], l) < k).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanClassAccuracy {
    pub value: f64,
    /// Classes without any sample, left out of the mean.
    pub absent_classes: usize,
}

/// Unweighted mean of per-class recall over classes present in `labels`.
pub fn mean_class_accuracy(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<MeanClassAccuracy> {
    if labels.is_empty() || predictions.len() != labels.len() {
        return Err(Error::UndefinedMetric(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let mut total = vec![0usize; num_classes];
    let mut right = vec![0usize; num_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= num_classes {
            return Err(Error::Index(format!("label {l} outside [0, {num_classes})")));
        }
        total[l] += 1;
        right[l] += usize::from(p == l);
    }
    let present: Vec<usize> = (0..num_classes).filter(|&c| total[c] > 0).collect();
    let value = present.iter().map(|&c| right[c] as f64 / total[c] as f64).sum::<f64>() / present.len() as f64;
    Ok(MeanClassAccuracy { value, absent_classes: num_classes - present.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManyHot {
    pub precision: f64,
    pub recall: f64,
    pub classes: Vec<usize>,
}

/// Classes with more than `threshold` training instances.
pub fn many_hot_classes(train_counts: &[usize], threshold: usize) -> Vec<usize> {
    (0..train_counts.len()).filter(|&c| train_counts[c] > threshold).collect()
}

/// Actions whose verb and noun are both many-hot and that occur in training.
pub fn many_hot_actions(
    pairs: &[(usize, usize)],
    action_counts: &[usize],
    verb_counts: &[usize],
    noun_counts: &[usize],
    threshold: usize,
) -> Vec<usize> {
    (0..pairs.len())
        .filter(|&a| {
            let (v, n) = pairs[a];
            action_counts.get(a).copied().unwrap_or(0) >= 1
                && verb_counts.get(v).copied().unwrap_or(0) > threshold
                && noun_counts.get(n).copied().unwrap_or(0) > threshold
        })
        .collect()
}

/// Macro precision and recall over `classes`, counting only samples whose
/// true label is in `classes`. A class never predicted has precision 0.
pub fn many_hot_precision_recall(predictions: &[usize], labels: &[usize], classes: &[usize]) -> Result<ManyHot> {
    if classes.is_empty() {
        return Err(Error::UndefinedMetric("many-hot class list is empty".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::dim("many_hot", format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    let kept: Vec<(usize, usize)> = predictions.iter().zip(labels).filter(|(_, l)| classes.contains(l)).map(|(&p, &l)| (p, l)).collect();
    let (mut precision, mut recall) = (0.0, 0.0);
    for &c in classes {
        let tp = kept.iter().filter(|&&(p, l)| p == c && l == c).count() as f64;
        let predicted = kept.iter().filter(|&&(p, _)| p == c).count() as f64;
        let actual = kept.iter().filter(|&&(_, l)| l == c).count() as f64;
        precision += if predicted > 0.0 { tp / predicted } else { 0.0 };
        recall += if actual > 0.0 { tp / actual } else { 0.0 };
    }
    let k = classes.len() as f64;
    Ok(ManyHot { precision: precision / k, recall: recall / k, classes: classes.to_vec() })
}

/// Viewing ray of a normalized image point for a square-pixel pinhole camera
/// whose horizontal field of view spans `x ∈ [-1, 1]`.
pub fn viewing_ray(p: [f64; 2], fov_deg: f64) -> [f64; 3] {
    let f = 1.0 / (fov_deg.to_radians() / 2.0).tan();
    [p[0], p[1], f]
}

fn ray_angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
    let cross = [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]];
    let c = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    let d = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    c.atan2(d).to_degrees()
}

/// Mean angle in degrees between predicted and true viewing rays over valid frames.
pub fn aae(pred: &[[f64; 2]], gt: &[[f64; 2]], valid: &[bool], fov_deg: f64) -> Result<f64> {
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::Config(format!("fov {fov_deg}° outside (0, 180)")));
    }
    if pred.len() != gt.len() || gt.len() != valid.len() {
        return Err(Error::dim("aae", format!("{} / {} / {} entries", pred.len(), gt.len(), valid.len())));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for i in (0..pred.len()).filter(|&i| valid[i]) {
        sum += ray_angle_deg(viewing_ray(pred[i], fov_deg), viewing_ray(gt[i], fov_deg));
        n += 1;
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no valid frames for AAE".into()));
    }
    Ok(sum / n as f64)
}

/// Grid cell `(row, col)` containing a normalized point.
pub fn cell_of(p: [f64; 2], m: usize, n: usize) -> usize {
    let col = (((p[0] + 1.0) / 2.0 * n as f64).floor() as isize).clamp(0, n as isize - 1) as usize;
    let row = (((p[1] + 1.0) / 2.0 * m as f64).floor() as isize).clamp(0, m as isize - 1) as usize;
    row * n + col
}

/// Single-positive ROC area of one map: `P(score_neg < score_pos) + ½·P(tie)`.
pub fn frame_auc(map: &[f64], positive: usize) -> f64 {
    let s = map[positive];
    let (mut below, mut ties) = (0usize, 0usize);
    for (i, &v) in map.iter().enumerate() {
        if i != positive {
            if v < s {
                below += 1;
            } else if v == s {
                ties += 1;
            }
        }
    }
    (below as f64 + 0.5 * ties as f64) / (map.len() - 1) as f64
}

/// Mean per-frame AUC of `frames × m × n` heatmaps against the ground-truth cell.
pub fn auc_saliency(heatmaps: &[f64], m: usize, n: usize, gt: &[[f64; 2]], valid: &[bool]) -> Result<f64> {
    if m * n < 2 || heatmaps.len() != gt.len() * m * n || gt.len() != valid.len() {
        return Err(Error::dim("auc_saliency", format!("{} values for {} frames of {m}×{n}", heatmaps.len(), gt.len())));
    }
    let (mut sum, mut k) = (0.0, 0usize);
    for f in (0..gt.len()).filter(|&f| valid[f]) {
        sum += frame_auc(&heatmaps[f * m * n..(f + 1) * m * n], cell_of(gt[f], m, n));
        k += 1;
    }
    if k == 0 {
        return Err(Error::UndefinedMetric("no valid frames for AUC".into()));
    }
    Ok(sum / k as f64)
}

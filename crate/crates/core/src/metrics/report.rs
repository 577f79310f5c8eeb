//! Per-task metric bundles and their JSON/CSV forms.

use serde::{Deserialize, Serialize};

use super::{aae, argmax, auc_saliency, many_hot_precision_recall, mean_class_accuracy, topk_accuracy, ManyHot};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub samples: usize,
    pub top1: f64,
    /// Top-`min(5, K)`.
    pub top5: f64,
    pub mean_class_accuracy: f64,
    pub absent_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub many_hot: Option<ManyHot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoordinateMetrics {
    /// `None` when no frame could be evaluated.
    pub aae_degrees: Option<f64>,
    pub auc: Option<f64>,
    /// Mean Euclidean distance in normalized frame units.
    pub mean_normalized_error: Option<f64>,
    pub evaluated_frames: usize,
    pub skipped_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TaskMetrics {
    Classification(ClassificationMetrics),
    Coordinate(CoordinateMetrics),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    #[serde(flatten)]
    pub metrics: TaskMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub tasks: Vec<TaskReport>,
}

/// Classes to restrict many-hot precision/recall to.
#[derive(Clone, Debug, PartialEq)]
pub struct ManyHotSpec {
    pub classes: Vec<usize>,
}

pub fn classification_metrics(
    logits: &[f64],
    num_classes: usize,
    labels: &[usize],
    many_hot: Option<&ManyHotSpec>,
) -> Result<ClassificationMetrics> {
    let top1 = topk_accuracy(logits, num_classes, labels, 1)?;
    let top5 = topk_accuracy(logits, num_classes, labels, num_classes.min(5))?;
    let preds: Vec<usize> = logits.chunks(num_classes).map(argmax).collect();
    let mca = mean_class_accuracy(&preds, labels, num_classes)?;
    let many_hot = match many_hot {
        Some(spec) if !spec.classes.is_empty() => Some(many_hot_precision_recall(&preds, labels, &spec.classes)?),
        _ => None,
    };
    Ok(ClassificationMetrics {
        samples: labels.len(),
        top1,
        top5,
        mean_class_accuracy: mca.value,
        absent_classes: mca.absent_classes,
        many_hot,
    })
}

/// Per-frame predictions of one point track.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CoordinateEval {
    /// Predicted and true points in normalized frame coordinates.
    pub pred: Vec<[f64; 2]>,
    pub gt: Vec<[f64; 2]>,
    /// True points in the normalized coordinates of the heatmap grid.
    pub gt_grid: Vec<[f64; 2]>,
    pub valid: Vec<bool>,
    /// `frames × m × n` normalized heatmaps.
    pub heatmaps: Vec<f64>,
    pub m: usize,
    pub n: usize,
}

impl CoordinateEval {
    pub fn extend(&mut self, other: CoordinateEval) {
        self.pred.extend(other.pred);
        self.gt.extend(other.gt);
        self.gt_grid.extend(other.gt_grid);
        self.valid.extend(other.valid);
        self.heatmaps.extend(other.heatmaps);
        self.m = other.m;
        self.n = other.n;
    }
}

fn allow_undefined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn coordinate_metrics(e: &CoordinateEval, fov_deg: f64) -> Result<CoordinateMetrics> {
    let evaluated = e.valid.iter().filter(|&&v| v).count();
    let err = (evaluated > 0).then(|| {
        e.pred
            .iter()
            .zip(&e.gt)
            .zip(&e.valid)
            .filter(|(_, &v)| v)
            .map(|((p, g), _)| (p[0] - g[0]).hypot(p[1] - g[1]))
            .sum::<f64>()
            / evaluated as f64
    });
    Ok(CoordinateMetrics {
        aae_degrees: allow_undefined(aae(&e.pred, &e.gt, &e.valid, fov_deg))?,
        auc: allow_undefined(auc_saliency(&e.heatmaps, e.m, e.n, &e.gt_grid, &e.valid))?,
        mean_normalized_error: err,
        evaluated_frames: evaluated,
        skipped_frames: e.valid.len() - evaluated,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x}"))
}

impl MetricsReport {
    pub fn get(&self, task: &str) -> Option<&TaskMetrics> {
        self.tasks.iter().find(|t| t.task == task).map(|t| &t.metrics)
    }

    pub fn classification(&self, task: &str) -> Option<&ClassificationMetrics> {
        match self.get(task) {
            Some(TaskMetrics::Classification(c)) => Some(c),
            _ => None,
        }
    }

    pub fn coordinate(&self, task: &str) -> Option<&CoordinateMetrics> {
        match self.get(task) {
            Some(TaskMetrics::Coordinate(c)) => Some(c),
            _ => None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header line for [`MetricsReport::csv_rows`].
    pub fn csv_header() -> &'static str {
        "run,split,task,top1,top5,mean_class_accuracy,many_hot_precision,many_hot_recall,aae_degrees,auc,mean_normalized_error,evaluated_frames,skipped_frames"
    }

    /// One CSV row per task, tagged with `run` for cross-run tables.
    pub fn csv_rows(&self, run: &str) -> Vec<String> {
        self.tasks
            .iter()
            .map(|t| match &t.metrics {
                TaskMetrics::Classification(c) => format!(
                    "{run},{},{},{},{},{},{},{},,,,,",
                    self.split,
                    t.task,
                    c.top1,
                    c.top5,
                    c.mean_class_accuracy,
                    opt(c.many_hot.as_ref().map(|m| m.precision)),
                    opt(c.many_hot.as_ref().map(|m| m.recall)),
                ),
                TaskMetrics::Coordinate(c) => format!(
                    "{run},{},{},,,,,,{},{},{},{},{}",
                    self.split,
                    t.task,
                    opt(c.aae_degrees),
                    opt(c.auc),
                    opt(c.mean_normalized_error),
                    c.evaluated_frames,
                    c.skipped_frames
                ),
            })
            .collect()
    }
}

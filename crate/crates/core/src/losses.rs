//! Per-task losses and their equal-weight sum.

use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Serialize, Serializer};

use crate::autograd::{Graph, Var};
use crate::dsnt::{coord_loss, normalize_heatmap, CoordLoss, CoordLossConfig, CoordinateTrack};
use crate::error::{Error, Result};
use crate::model::{HeadOutput, Mode, ModelOutputs, MultitaskModel, Target, TaskKind, TaskSet};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A batch of clips and whatever supervision is available for them.
///
/// Label vectors are either empty (no supervision) or one entry per sample.
/// Coordinate tracks cover the input frames and are aligned to the heatmap
/// frames when the loss is built.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// `[B, C, T, H, W]`.
    pub clips: Tensor<T>,
    pub clip_ids: Vec<String>,
    pub actions: Vec<usize>,
    pub verbs: Vec<usize>,
    pub nouns: Vec<usize>,
    pub hands: Vec<CoordinateTrack>,
    pub gaze: Vec<CoordinateTrack>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.clips.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self, target: Target) -> &[usize] {
        match target {
            Target::Action => &self.actions,
            Target::Verb => &self.verbs,
            Target::Noun => &self.nouns,
            Target::Gaze | Target::Hands => &[],
        }
    }

    pub fn tracks(&self, target: Target) -> &[CoordinateTrack] {
        match target {
            Target::Gaze => &self.gaze,
            Target::Hands => &self.hands,
            _ => &[],
        }
    }
}

/// Mean cross-entropy of `logits: [B, K]` against class ids.
pub fn cross_entropy<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    g.nll(lp, labels)
}

/// Loss nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub total: Var,
    /// Declaration order; skipped tasks are absent.
    pub per_task: Vec<(String, Var)>,
    pub coordinate_parts: Vec<(String, CoordLoss)>,
    /// Coordinate tasks whose batch had no valid frame.
    pub skipped: Vec<String>,
}

/// Scalar loss values, in task declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub per_task: Vec<(String, f64)>,
    pub total: f64,
    pub skipped: Vec<String>,
}

impl LossReport {
    pub fn get(&self, task: &str) -> Option<f64> {
        self.per_task.iter().find(|(n, _)| n == task).map(|(_, v)| *v)
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.per_task.iter().all(|(_, v)| v.is_finite())
    }
}

struct OrderedMap<'a>(&'a [(String, f64)]);

impl Serialize for OrderedMap<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut m = s.serialize_map(Some(self.0.len()))?;
        for (k, v) in self.0 {
            m.serialize_entry(k, v)?;
        }
        m.end()
    }
}

impl Serialize for LossReport {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("LossReport", 3)?;
        st.serialize_field("per_task", &OrderedMap(&self.per_task))?;
        st.serialize_field("total", &self.total)?;
        st.serialize_field("skipped", &self.skipped)?;
        st.end()
    }
}

impl LossGraph {
    pub fn report<T: Scalar>(&self, g: &Graph<T>) -> LossReport {
        LossReport {
            per_task: self.per_task.iter().map(|(n, v)| (n.clone(), g.value(*v).item().to_f64_lossy())).collect(),
            total: g.value(self.total).item().to_f64_lossy(),
            skipped: self.skipped.clone(),
        }
    }

    pub fn task(&self, name: &str) -> Option<Var> {
        self.per_task.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

/// Builds every declared task's loss from head outputs and sums them with equal weight.
pub fn task_losses<T: Scalar>(
    g: &mut Graph<T>,
    tasks: &TaskSet,
    outputs: &ModelOutputs,
    batch: &Batch<T>,
    cfg: &CoordLossConfig,
) -> Result<LossGraph> {
    let mut per_task = Vec::new();
    let mut coordinate_parts = Vec::new();
    let mut skipped = Vec::new();
    for spec in tasks.tasks() {
        let out = outputs
            .get(&spec.name)
            .ok_or_else(|| Error::Contract(format!("no head output for task {:?}", spec.name)))?;
        match (spec.kind, out) {
            (TaskKind::Classification { .. }, HeadOutput::Logits(z)) => {
                let labels = batch.labels(spec.target);
                if labels.is_empty() {
                    return Err(Error::Supervision(format!("batch has no labels for task {:?}", spec.name)));
                }
                per_task.push((spec.name.clone(), cross_entropy(g, z, labels)?));
            }
            (TaskKind::Coordinate { .. }, HeadOutput::Heatmaps(raw)) => {
                let tracks = batch.tracks(spec.target);
                if tracks.is_empty() {
                    return Err(Error::Supervision(format!("batch has no tracks for task {:?}", spec.name)));
                }
                let l = g.shape(raw.values)[2];
                let aligned: Vec<CoordinateTrack> = tracks.iter().map(|t| t.resample(l)).collect();
                if aligned.iter().all(|t| t.valid_count() == 0) {
                    skipped.push(spec.name.clone());
                    continue;
                }
                let hm = normalize_heatmap(g, raw)?;
                let parts = coord_loss(g, &hm, &aligned, cfg)?;
                per_task.push((spec.name.clone(), parts.total));
                coordinate_parts.push((spec.name.clone(), parts));
            }
            _ => return Err(Error::Contract(format!("head output kind mismatch for task {:?}", spec.name))),
        }
    }
    let mut iter = per_task.iter().map(|(_, v)| *v);
    let first = iter.next().ok_or_else(|| Error::Supervision("no task has supervision in this batch".into()))?;
    let mut total = first;
    for v in iter {
        total = g.add(total, v)?;
    }
    Ok(LossGraph { total, per_task, coordinate_parts, skipped })
}

/// Runs the model on `batch` and builds its composite loss.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &mut MultitaskModel<T>,
    batch: &Batch<T>,
    mode: Mode,
    cfg: &CoordLossConfig,
) -> Result<(ModelOutputs, LossGraph)> {
    let x = g.leaf(batch.clips.clone());
    let outputs = model.forward(g, x, mode)?;
    let losses = task_losses(g, &model.tasks().clone(), &outputs, batch, cfg)?;
    Ok((outputs, losses))
}

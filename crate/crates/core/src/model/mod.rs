//! Shared 3D-CNN feature extractor with task-specific output layers.
//!
//! Every head consumes the same `[B, C, l, m, n]` feature map. Parameters are
//! partitioned by name prefix: `backbone.` for the shared block and
//! `head.<task>.` for each head, so a head's loss only ever reaches its own
//! parameters and the shared ones.

mod cam;
mod params;
mod tasks;

pub use cam::{class_activation_map, export_cam_pgm};
pub use params::ParamSet;
pub use tasks::{LabelSpace, Target, TaskKind, TaskSet, TaskSpec};

use serde::{Deserialize, Serialize};

use crate::autograd::{conv3d_output_extent, BatchNormMode, Conv3dSpec, Graph, RunningStats, Var};
use crate::checkpoint::Checkpoint;
use crate::dsnt::HeatmapStack;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use params::normal_init;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// Adds a second stride-1 convolution whose output is summed with the first.
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub stages: Vec<StageConfig>,
}

impl ArchConfig {
    /// 16×32×32 RGB clips; three stages of 16/32/64 channels reaching an 8×8×8 map.
    pub fn desk_default() -> Self {
        ArchConfig {
            in_channels: 3,
            frames: 16,
            height: 32,
            width: 32,
            stages: vec![
                StageConfig { out_channels: 16, kernel: [3, 3, 3], stride: [1, 2, 2], residual: false },
                StageConfig { out_channels: 32, kernel: [3, 3, 3], stride: [2, 2, 2], residual: false },
                StageConfig { out_channels: 64, kernel: [1, 3, 3], stride: [1, 1, 1], residual: false },
            ],
        }
    }

    /// `[C, l, m, n]` of the shared feature map.
    pub fn feature_shape(&self) -> Result<[usize; 4]> {
        if self.stages.len() < 2 {
            return Err(Error::Config(format!("need at least 2 stages, got {}", self.stages.len())));
        }
        if self.frames < 4 {
            return Err(Error::Config(format!("need at least 4 input frames, got {}", self.frames)));
        }
        let mut ext = [self.frames, self.height, self.width];
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.kernel.iter().any(|&k| k == 0) {
                return Err(Error::Config(format!("stage {i}: zero channels or kernel extent")));
            }
            for a in 0..3 {
                ext[a] = conv3d_output_extent(ext[a], s.kernel[a], s.stride[a], s.kernel[a] / 2)
                    .ok_or_else(|| Error::Config(format!("stage {i}: feature map collapses on axis {a}")))?;
            }
        }
        if ext[1] < 2 || ext[2] < 2 {
            return Err(Error::Config(format!(
                "feature map spatial size {}×{} is below 2×2",
                ext[1], ext[2]
            )));
        }
        let c = self.stages.last().expect("checked").out_channels;
        Ok([c, ext[0], ext[1], ext[2]])
    }
}

fn conv_spec(stage: &StageConfig) -> Conv3dSpec {
    Conv3dSpec { stride: stage.stride, padding: stage.kernel.map(|k| k / 2) }
}

/// The shared block: conv → batchnorm → ReLU stages.
#[derive(Clone, Debug)]
pub struct SharedBackbone<T> {
    arch: ArchConfig,
    params: ParamSet<T>,
    stats: Vec<RunningStats<T>>,
}

fn stage_prefix(i: usize) -> String {
    format!("backbone.s{i}")
}

impl<T: Scalar> SharedBackbone<T> {
    fn new(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.feature_shape()?;
        let mut params = ParamSet::default();
        let mut stats = Vec::new();
        let mut cin = arch.in_channels;
        for (i, s) in arch.stages.iter().enumerate() {
            let convs = if s.residual { 2 } else { 1 };
            for c in 0..convs {
                let inc = if c == 0 { cin } else { s.out_channels };
                let name = format!("{}.conv{c}.weight", stage_prefix(i));
                let fan_in = inc * s.kernel.iter().product::<usize>();
                let shape = [s.out_channels, inc, s.kernel[0], s.kernel[1], s.kernel[2]];
                params.insert(name.clone(), normal_init(seed, &name, &shape, (2.0 / fan_in as f64).sqrt()));
                params.insert(format!("{}.bn{c}.scale", stage_prefix(i)), Tensor::full(&[s.out_channels], T::one()));
                params.insert(format!("{}.bn{c}.shift", stage_prefix(i)), Tensor::zeros(&[s.out_channels]));
                stats.push(RunningStats::new(s.out_channels));
            }
            cin = s.out_channels;
        }
        Ok(SharedBackbone { arch: arch.clone(), params, stats })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    /// Runs the shared block. Train mode uses batch statistics and updates the
    /// running averages.
    pub fn forward(&mut self, g: &mut Graph<T>, clips: Var, mode: Mode) -> Result<Var> {
        match mode {
            Mode::Eval => self.forward_eval(g, clips),
            Mode::Train => {
                let mut stats = std::mem::take(&mut self.stats);
                let out = self.run(g, clips, |g, x, sc, sh, k| {
                    g.batchnorm3d(x, sc, sh, BatchNormMode::Train(&mut stats[k]))
                });
                self.stats = stats;
                out
            }
        }
    }

    /// Replaces the running statistics with plain averages of the batch
    /// statistics of `batches`, computed with the current parameters.
    pub fn recalibrate(&mut self, batches: impl IntoIterator<Item = Tensor<T>>) -> Result<()> {
        let saved = self.stats.clone();
        self.stats.iter_mut().for_each(|s| s.averaging = Some(0));
        let mut seen = false;
        for clips in batches {
            let mut g = Graph::new();
            let x = g.leaf(clips);
            if let Err(e) = self.forward(&mut g, x, Mode::Train) {
                self.stats = saved;
                return Err(e);
            }
            seen = true;
        }
        if !seen {
            self.stats = saved;
            return Ok(());
        }
        self.stats.iter_mut().for_each(|s| s.averaging = None);
        Ok(())
    }

    pub fn forward_eval(&self, g: &mut Graph<T>, clips: Var) -> Result<Var> {
        self.run(g, clips, |g, x, sc, sh, k| g.batchnorm3d(x, sc, sh, BatchNormMode::Eval(&self.stats[k])))
    }

    fn run(
        &self,
        g: &mut Graph<T>,
        clips: Var,
        mut norm: impl FnMut(&mut Graph<T>, Var, Var, Var, usize) -> Result<Var>,
    ) -> Result<Var> {
        let s = g.shape(clips);
        if s.len() != 5 || s[1] != self.arch.in_channels {
            return Err(Error::dim(
                "forward_shared",
                format!("expected [B, {}, T, H, W], got {s:?}", self.arch.in_channels),
            ));
        }
        let mut h = clips;
        let mut bn = 0;
        for (i, stage) in self.arch.stages.iter().enumerate() {
            let p = stage_prefix(i);
            let convs = if stage.residual { 2 } else { 1 };
            let mut first = None;
            for c in 0..convs {
                let w = g.bind_param(&format!("{p}.conv{c}.weight"), self.params.expect(&format!("{p}.conv{c}.weight")));
                let sc = g.bind_param(&format!("{p}.bn{c}.scale"), self.params.expect(&format!("{p}.bn{c}.scale")));
                let sh = g.bind_param(&format!("{p}.bn{c}.shift"), self.params.expect(&format!("{p}.bn{c}.shift")));
                let spec = if c == 0 { conv_spec(stage) } else { Conv3dSpec { stride: [1; 3], padding: stage.kernel.map(|k| k / 2) } };
                let y = g.conv3d(h, w, None, spec)?;
                let y = norm(g, y, sc, sh, bn)?;
                bn += 1;
                h = match first {
                    None => {
                        let r = g.relu(y);
                        first = Some(r);
                        r
                    }
                    Some(skip) => {
                        let sum = g.add(y, skip)?;
                        g.relu(sum)
                    }
                };
            }
        }
        Ok(h)
    }
}

/// One task-specific output layer.
#[derive(Clone, Debug)]
pub struct TaskHead<T> {
    spec: TaskSpec,
    params: ParamSet<T>,
}

/// Output of a head for one batch.
#[derive(Clone, Copy, Debug)]
pub enum HeadOutput {
    /// `[B, K]` logits.
    Logits(Var),
    /// Raw `[B, P, l, m, n]` heatmaps.
    Heatmaps(HeatmapStack),
}

impl<T: Scalar> TaskHead<T> {
    fn new(spec: &TaskSpec, channels: usize, seed: u64) -> Self {
        let mut params = ParamSet::default();
        let w = format!("head.{}.weight", spec.name);
        let b = format!("head.{}.bias", spec.name);
        match spec.kind {
            TaskKind::Classification { num_classes } => {
                params.insert(w.clone(), normal_init(seed, &w, &[channels, num_classes], (1.0 / channels as f64).sqrt()));
                params.insert(b, Tensor::zeros(&[num_classes]));
            }
            TaskKind::Coordinate { num_points } => {
                params.insert(
                    w.clone(),
                    normal_init(seed, &w, &[num_points, channels, 1, 1, 1], (2.0 / channels as f64).sqrt()),
                );
                params.insert(b, Tensor::zeros(&[num_points]));
            }
        }
        TaskHead { spec: spec.clone(), params }
    }

    pub fn spec(&self) -> &TaskSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn weight(&self) -> &Tensor<T> {
        self.params.expect(&format!("head.{}.weight", self.spec.name))
    }

    pub fn bias(&self) -> &Tensor<T> {
        self.params.expect(&format!("head.{}.bias", self.spec.name))
    }

    fn bind(&self, g: &mut Graph<T>) -> (Var, Var) {
        let w = format!("head.{}.weight", self.spec.name);
        let b = format!("head.{}.bias", self.spec.name);
        (g.bind_param(&w, self.params.expect(&w)), g.bind_param(&b, self.params.expect(&b)))
    }

    pub fn forward(&self, g: &mut Graph<T>, features: Var) -> Result<HeadOutput> {
        match self.spec.kind {
            TaskKind::Classification { .. } => classification_forward(self, g, features).map(HeadOutput::Logits),
            TaskKind::Coordinate { .. } => coordinate_forward(self, g, features).map(HeadOutput::Heatmaps),
        }
    }
}

/// Global average pool over `(l, m, n)` followed by a linear map to logits.
pub fn classification_forward<T: Scalar>(head: &TaskHead<T>, g: &mut Graph<T>, features: Var) -> Result<Var> {
    if !matches!(head.spec.kind, TaskKind::Classification { .. }) {
        return Err(Error::Contract(format!("head {:?} is not a classification head", head.spec.name)));
    }
    if g.shape(features).len() != 5 {
        return Err(Error::dim("classification_forward", format!("features {:?}", g.shape(features))));
    }
    let pooled = g.global_avg_pool(features)?;
    let (w, b) = head.bind(g);
    g.linear(pooled, w, b)
}

/// Pointwise convolution from `C` feature channels to one heatmap per point and frame.
pub fn coordinate_forward<T: Scalar>(head: &TaskHead<T>, g: &mut Graph<T>, features: Var) -> Result<HeatmapStack> {
    if !matches!(head.spec.kind, TaskKind::Coordinate { .. }) {
        return Err(Error::Contract(format!("head {:?} is not a coordinate head", head.spec.name)));
    }
    let (w, b) = head.bind(g);
    let z = g.conv3d(features, w, Some(b), Conv3dSpec::default())?;
    Ok(HeatmapStack::raw(z))
}

/// Shared block plus one head per declared task.
#[derive(Clone, Debug)]
pub struct MultitaskModel<T> {
    pub backbone: SharedBackbone<T>,
    pub heads: Vec<TaskHead<T>>,
    tasks: TaskSet,
}

/// Graph nodes produced by a full forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutputs {
    pub features: Var,
    pub heads: Vec<(String, HeadOutput)>,
}

impl ModelOutputs {
    pub fn get(&self, task: &str) -> Option<HeadOutput> {
        self.heads.iter().find(|(n, _)| n == task).map(|(_, o)| *o)
    }
}

/// Deterministically initializes a model. Each tensor's values depend only
/// on `(seed, parameter name)`.
pub fn build_model<T: Scalar>(arch: &ArchConfig, tasks: &TaskSet, seed: u64) -> Result<MultitaskModel<T>> {
    let [channels, ..] = arch.feature_shape()?;
    let backbone = SharedBackbone::new(arch, seed)?;
    let heads = tasks.tasks().iter().map(|t| TaskHead::new(t, channels, seed)).collect();
    Ok(MultitaskModel { backbone, heads, tasks: tasks.clone() })
}

/// Name of a running-statistics checkpoint entry.
fn stats_names(k: usize) -> [String; 2] {
    [format!("backbone.bn{k}.running_mean"), format!("backbone.bn{k}.running_var")]
}

const TRACKED_ENTRY: &str = "backbone.running_tracked";

impl<T: Scalar> MultitaskModel<T> {
    pub fn tasks(&self) -> &TaskSet {
        &self.tasks
    }

    pub fn arch(&self) -> &ArchConfig {
        self.backbone.arch()
    }

    pub fn head(&self, name: &str) -> Option<&TaskHead<T>> {
        self.heads.iter().find(|h| h.name() == name)
    }

    pub fn forward_shared(&mut self, g: &mut Graph<T>, clips: Var, mode: Mode) -> Result<Var> {
        self.backbone.forward(g, clips, mode)
    }

    /// See [`SharedBackbone::recalibrate`].
    pub fn recalibrate_bn(&mut self, batches: impl IntoIterator<Item = Tensor<T>>) -> Result<()> {
        self.backbone.recalibrate(batches)
    }

    pub fn forward(&mut self, g: &mut Graph<T>, clips: Var, mode: Mode) -> Result<ModelOutputs> {
        let features = self.backbone.forward(g, clips, mode)?;
        self.forward_heads(g, features)
    }

    /// Eval-mode forward; takes `&self` so snapshots can serve concurrent readers.
    pub fn forward_eval(&self, g: &mut Graph<T>, clips: Var) -> Result<ModelOutputs> {
        let features = self.backbone.forward_eval(g, clips)?;
        self.forward_heads(g, features)
    }

    fn forward_heads(&self, g: &mut Graph<T>, features: Var) -> Result<ModelOutputs> {
        let mut heads = Vec::with_capacity(self.heads.len());
        for h in &self.heads {
            heads.push((h.name().to_string(), h.forward(g, features)?));
        }
        Ok(ModelOutputs { features, heads })
    }

    /// All trainable tensors, backbone first, then heads in declaration order.
    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.backbone.params.iter().chain(self.heads.iter().flat_map(|h| h.params.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.backbone.params.iter_mut().chain(self.heads.iter_mut().flat_map(|h| h.params.iter_mut()))
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params_mut().find(|(n, _)| *n == name).map(|(_, t)| t)
    }

    /// Adds gradients of every bound parameter leaf in `g` to the parameter accumulators.
    pub fn collect_grads(&mut self, g: &Graph<T>) {
        for (name, var) in g.bindings() {
            if let Some(grad) = g.grad(*var) {
                if let Some(p) = self.param_mut(name) {
                    p.accumulate_grad(grad);
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        for (n, t) in self.params() {
            ck.push(n, t);
        }
        for (k, s) in self.backbone.stats.iter().enumerate() {
            let [m, v] = stats_names(k);
            ck.push(m, &Tensor::<T>::from_vec(&[s.mean.len()], s.mean.clone()).expect("shape"));
            ck.push(v, &Tensor::<T>::from_vec(&[s.var.len()], s.var.clone()).expect("shape"));
        }
        let tracked = self.backbone.stats.iter().all(|s| s.tracked);
        ck.push(TRACKED_ENTRY, &Tensor::<T>::scalar(if tracked { T::one() } else { T::zero() }));
        ck
    }

    /// Loads parameters and running statistics. Fails if the checkpoint's heads
    /// differ from this model's task set or any shape disagrees.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        let stored_heads: std::collections::BTreeSet<&str> = ck
            .model_entries()
            .filter_map(|(n, _)| n.strip_prefix("head.").and_then(|r| r.split('.').next()))
            .collect();
        let declared: std::collections::BTreeSet<&str> = self.heads.iter().map(|h| h.name()).collect();
        if stored_heads != declared {
            return Err(Error::Config(format!(
                "task mismatch: checkpoint has heads {stored_heads:?}, request declares {declared:?}"
            )));
        }
        let names: Vec<String> = self.params().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let stored = ck.get(name).ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            let p = self.param_mut(name).expect("own name");
            if p.shape() != stored.shape() {
                return Err(Error::dim("load", format!("{name}: stored {:?}, model {:?}", stored.shape(), p.shape())));
            }
            for (d, &s) in p.data_mut().iter_mut().zip(stored.data()) {
                *d = T::from_f32(s).expect("finite");
            }
        }
        let tracked = ck.get(TRACKED_ENTRY).map_or(false, |t| t.item() > 0.5);
        for (k, s) in self.backbone.stats.iter_mut().enumerate() {
            let [m, v] = stats_names(k);
            for (name, dst) in [(m, &mut s.mean), (v, &mut s.var)] {
                let stored = ck.get(&name).ok_or_else(|| Error::Config(format!("checkpoint lacks {name}")))?;
                if stored.len() != dst.len() {
                    return Err(Error::dim("load", format!("{name}: {} values for {}", stored.len(), dst.len())));
                }
                dst.iter_mut().zip(stored.data()).for_each(|(d, &x)| *d = T::from_f32(x).expect("finite"));
            }
            s.tracked = tracked;
        }
        Ok(())
    }

    /// Copies weights and statistics into a model of another precision.
    pub fn cast<U: Scalar>(&self) -> MultitaskModel<U> {
        let mut out = build_model::<U>(self.arch(), &self.tasks, 0).expect("same architecture");
        out.load_checkpoint(&self.to_checkpoint()).expect("same layout");
        out
    }
}

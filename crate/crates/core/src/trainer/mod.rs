//! Training recipe: clip sampling, augmentation, cyclical learning rate,
//! Nesterov SGD and the epoch loop with best-epoch checkpointing.

mod augment;
mod fit;

pub use augment::{augment, crop_offset, from_crop, to_crop, AugmentMode, Augmented};
pub use fit::{epoch_batches, evaluate, fit, make_batch, recalibrate_bn, EpochRecord, FitResult, ManyHotTables, StepRecord, BEST_EPOCH_ENTRY, BEST_METRIC_ENTRY};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dsnt::CoordLossConfig;
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_FOV_DEG, DEFAULT_MANY_HOT_THRESHOLD};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub max_lr: f64,
    pub cycle_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Frames fed to the model.
    pub clip_len: usize,
    /// Frames the clip is sampled from.
    pub window_len: usize,
    pub train_scale: usize,
    pub crop_size: usize,
    pub seed: u64,
    pub main_task: String,
    pub coord_loss: CoordLossConfig,
    pub fov_deg: f64,
    pub many_hot_threshold: usize,
    /// Training clips (the split's first ones, eval preprocessing) whose batch
    /// statistics replace the BatchNorm running averages before each
    /// validation pass; 0 keeps the moving averages.
    pub bn_recalibration_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            max_lr: 5e-3,
            cycle_epochs: 20.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 8,
            epochs: 30,
            clip_len: 16,
            window_len: 32,
            train_scale: 37,
            crop_size: 32,
            seed: 0,
            main_task: "action".into(),
            coord_loss: CoordLossConfig::default(),
            fov_deg: DEFAULT_FOV_DEG,
            many_hot_threshold: DEFAULT_MANY_HOT_THRESHOLD,
            bn_recalibration_clips: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr <= self.max_lr) {
            return bad(format!("need 0 < base_lr ≤ max_lr, got {} and {}", self.base_lr, self.max_lr));
        }
        if !(self.cycle_epochs > 0.0) {
            return bad("cycle_epochs must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay ≥ 0".into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.clip_len == 0 {
            return bad("batch_size, epochs and clip_len must be positive".into());
        }
        if self.clip_len > self.window_len {
            return bad(format!("clip_len {} exceeds window_len {}", self.clip_len, self.window_len));
        }
        if self.crop_size == 0 || self.crop_size > self.train_scale {
            return bad(format!("crop_size {} must be in 1..=train_scale {}", self.crop_size, self.train_scale));
        }
        if !(self.fov_deg > 0.0 && self.fov_deg < 180.0) {
            return bad(format!("fov_deg {} outside (0, 180)", self.fov_deg));
        }
        self.coord_loss.validate()
    }
}

/// Triangular learning rate: `base → max` over the first half of each cycle,
/// `max → base` over the second.
pub fn cyclical_lr(epoch_progress: f64, cfg: &TrainConfig) -> f64 {
    let cycle = cfg.cycle_epochs;
    let pos = epoch_progress.max(0.0) % cycle;
    let half = cycle / 2.0;
    let frac = if pos <= half { pos / half } else { (cycle - pos) / half };
    cfg.base_lr + (cfg.max_lr - cfg.base_lr) * frac
}

/// Velocity buffers, one per parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    velocity: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new() -> Self {
        OptimizerState { velocity: Vec::new() }
    }

    pub fn velocity(&self, name: &str) -> Option<&Tensor<T>> {
        self.velocity.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor<T>)] {
        &self.velocity
    }

    pub fn insert(&mut self, name: &str, v: Tensor<T>) {
        match self.velocity.iter_mut().find(|(n, _)| n == name) {
            Some(slot) => slot.1 = v,
            None => self.velocity.push((name.to_string(), v)),
        }
    }

    pub fn push_to(&self, ck: &mut Checkpoint) {
        for (n, v) in &self.velocity {
            ck.push(format!("{}{n}", crate::checkpoint::OPT_PREFIX), v);
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Self {
        let velocity = ck.optimizer_entries().map(|(n, t)| (n.to_string(), t.cast())).collect();
        OptimizerState { velocity }
    }
}

/// One Nesterov step over every parameter with a gradient:
/// `g' = g + wd·p; v ← μ·v + g'; p ← p − lr·(g' + μ·v)`.
pub fn sgd_nesterov_step<'a, T: Scalar>(
    params: impl Iterator<Item = (&'a str, &'a mut Tensor<T>)>,
    state: &mut OptimizerState<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    let (lr, mu, wd) = (T::from_f64_lossy(lr), T::from_f64_lossy(momentum), T::from_f64_lossy(weight_decay));
    for (name, p) in params {
        let Some(grad) = p.grad().map(<[T]>::to_vec) else { continue };
        let v = match state.velocity.iter_mut().find(|(n, _)| n == name) {
            Some((_, v)) => v,
            None => {
                state.velocity.push((name.to_string(), Tensor::zeros(p.shape())));
                &mut state.velocity.last_mut().expect("just pushed").1
            }
        };
        if v.shape() != p.shape() {
            return Err(Error::State(format!("velocity of {name} has shape {:?}, parameter {:?}", v.shape(), p.shape())));
        }
        for ((w, vel), &g) in p.data_mut().iter_mut().zip(v.data_mut()).zip(&grad) {
            let g2 = g + wd * *w;
            *vel = mu * *vel + g2;
            *w -= lr * (g2 + mu * *vel);
        }
    }
    Ok(())
}

fn strided(start: usize, segment_len: usize, clip_len: usize, window_len: usize) -> Vec<usize> {
    let stride = (window_len / clip_len).max(1);
    (0..clip_len).map(|i| (start + i * stride).min(segment_len - 1)).collect()
}

/// Training placement: window start uniform over valid positions, then
/// `clip_len` evenly strided frames, clamped at the segment end.
pub fn sample_training_clip(segment_len: usize, clip_len: usize, window_len: usize, rng: &mut impl Rng) -> Vec<usize> {
    let segment_len = segment_len.max(1);
    let start = rng.gen_range(0..=segment_len.saturating_sub(window_len));
    strided(start, segment_len, clip_len, window_len)
}

/// Evaluation placement: the window centered on the segment.
pub fn sample_eval_clip(segment_len: usize, clip_len: usize, window_len: usize) -> Vec<usize> {
    let segment_len = segment_len.max(1);
    let center = (segment_len as f64 / 2.0).round() as usize;
    let start = center.saturating_sub(window_len / 2);
    strided(start, segment_len, clip_len, window_len)
}

#[cfg(test)]
mod tests;

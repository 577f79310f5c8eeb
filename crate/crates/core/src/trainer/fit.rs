//! Batch assembly, evaluation and the epoch loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::augment::from_crop;
use super::{augment, cyclical_lr, sample_eval_clip, sample_training_clip, sgd_nesterov_step, AugmentMode, OptimizerState, TrainConfig};
use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::dsnt::{dsnt, normalize_heatmap, CoordinateTrack};
use crate::error::{Error, Result};
use crate::losses::{total_loss, Batch, LossReport};
use crate::metrics::{
    classification_metrics, coordinate_metrics, many_hot_actions, many_hot_classes, CoordinateEval, ManyHotSpec,
    MetricsReport, TaskMetrics, TaskReport,
};
use crate::model::{HeadOutput, Mode, MultitaskModel, Target, TaskKind};
use crate::scalar::Scalar;
use crate::synthdata::AnnotatedSample;
use crate::tensor::Tensor;

pub const BEST_EPOCH_ENTRY: &str = "meta.best_epoch";
pub const BEST_METRIC_ENTRY: &str = "meta.best_val_metric";

/// Where each batch sample came from, for mapping predictions back.
#[derive(Clone, Debug)]
pub(crate) struct SampleView {
    frames: Vec<usize>,
    offset: [f64; 2],
}

/// Samples clips, augments them and stacks a `[B, 3, T, crop, crop]` batch.
pub fn make_batch<T: Scalar>(
    samples: &[&AnnotatedSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mode: AugmentMode,
) -> Result<Batch<T>> {
    make_batch_with_views(samples, cfg, rng, mode).map(|(b, _)| b)
}

fn make_batch_with_views<T: Scalar>(
    samples: &[&AnnotatedSample],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    mode: AugmentMode,
) -> Result<(Batch<T>, Vec<SampleView>)> {
    if samples.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let (c, t_len) = (cfg.crop_size, cfg.clip_len);
    let per = 3 * t_len * c * c;
    let mut data = Vec::with_capacity(samples.len() * per);
    let mut views = Vec::with_capacity(samples.len());
    let mut batch = Batch {
        clips: Tensor::zeros(&[1]),
        clip_ids: Vec::new(),
        actions: Vec::new(),
        verbs: Vec::new(),
        nouns: Vec::new(),
        hands: Vec::new(),
        gaze: Vec::new(),
    };
    for s in samples {
        let frames = match mode {
            AugmentMode::Train => sample_training_clip(s.num_frames, t_len, cfg.window_len, rng),
            AugmentMode::Eval => sample_eval_clip(s.num_frames, t_len, cfg.window_len),
        };
        let mut raw = Vec::with_capacity(t_len * s.height * s.width * 3);
        frames.iter().for_each(|&f| raw.extend_from_slice(s.frame(f)));
        let hands = s.hands.select_frames(&frames);
        let gaze = s.gaze.select_frames(&frames);
        let aug = augment(&raw, [t_len, s.height, s.width], &[&hands, &gaze], cfg, rng, mode)?;
        data.extend(aug.frames.iter().map(|&v| T::from_f32(v).expect("finite")));
        let mut tracks = aug.tracks.into_iter();
        batch.hands.push(tracks.next().expect("hands"));
        batch.gaze.push(tracks.next().expect("gaze"));
        batch.clip_ids.push(s.clip_id.clone());
        batch.actions.push(s.action);
        batch.verbs.push(s.verb);
        batch.nouns.push(s.noun);
        views.push(SampleView { frames, offset: aug.offset });
    }
    batch.clips = Tensor::from_vec(&[samples.len(), 3, t_len, c, c], data)?;
    Ok((batch, views))
}

/// Training-split class counts used to pick many-hot classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ManyHotTables {
    pub pairs: Vec<(usize, usize)>,
    pub action_counts: Vec<usize>,
    pub verb_counts: Vec<usize>,
    pub noun_counts: Vec<usize>,
    pub threshold: usize,
}

impl ManyHotTables {
    pub fn from_samples(train: &[&AnnotatedSample], pairs: &[(usize, usize)], verbs: usize, nouns: usize, threshold: usize) -> Self {
        let mut t = ManyHotTables {
            pairs: pairs.to_vec(),
            action_counts: vec![0; pairs.len()],
            verb_counts: vec![0; verbs],
            noun_counts: vec![0; nouns],
            threshold,
        };
        for s in train {
            t.action_counts[s.action] += 1;
            t.verb_counts[s.verb] += 1;
            t.noun_counts[s.noun] += 1;
        }
        t
    }

    pub fn classes(&self, target: Target) -> Vec<usize> {
        match target {
            Target::Action => many_hot_actions(&self.pairs, &self.action_counts, &self.verb_counts, &self.noun_counts, self.threshold),
            Target::Verb => many_hot_classes(&self.verb_counts, self.threshold),
            Target::Noun => many_hot_classes(&self.noun_counts, self.threshold),
            Target::Gaze | Target::Hands => Vec::new(),
        }
    }
}

fn label_of(s: &AnnotatedSample, target: Target) -> usize {
    match target {
        Target::Action => s.action,
        Target::Verb => s.verb,
        _ => s.noun,
    }
}

fn track_of(s: &AnnotatedSample, target: Target) -> &CoordinateTrack {
    if target == Target::Gaze {
        &s.gaze
    } else {
        &s.hands
    }
}

/// Eval-mode metrics over `samples` with centered clips and center crops.
pub fn evaluate<T: Scalar>(
    model: &MultitaskModel<T>,
    samples: &[&AnnotatedSample],
    cfg: &TrainConfig,
    many_hot: Option<&ManyHotTables>,
    split: &str,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric(format!("split {split:?} is empty")));
    }
    let tasks = model.tasks().tasks().to_vec();
    let mut logits: Vec<Vec<f64>> = vec![Vec::new(); tasks.len()];
    let mut coords: Vec<CoordinateEval> = vec![CoordinateEval::default(); tasks.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in samples.chunks(cfg.batch_size) {
        let (batch, views) = make_batch_with_views::<T>(chunk, cfg, &mut rng, AugmentMode::Eval)?;
        let mut g = Graph::new();
        let x = g.leaf(batch.clips);
        let out = model.forward_eval(&mut g, x)?;
        for (ti, spec) in tasks.iter().enumerate() {
            match out.get(&spec.name).expect("declared head") {
                HeadOutput::Logits(z) => logits[ti].extend(g.value(z).data().iter().map(|v| v.to_f64_lossy())),
                HeadOutput::Heatmaps(raw) => {
                    let hm = normalize_heatmap(&mut g, raw)?;
                    let xy = dsnt(&mut g, &hm)?;
                    let s = g.shape(hm.values).to_vec();
                    let (p, l, m, n) = (s[1], s[2], s[3], s[4]);
                    let maps = g.value(hm.values).data();
                    let pts = g.value(xy).data();
                    let mapped = if spec.target == Target::Gaze { &batch.gaze } else { &batch.hands };
                    let e = &mut coords[ti];
                    e.m = m;
                    e.n = n;
                    for (b, view) in views.iter().enumerate() {
                        let aligned = mapped[b].resample(l);
                        let original = track_of(chunk[b], spec.target);
                        for pi in 0..p {
                            for t in 0..l {
                                let slot = (b * p + pi) * l + t;
                                let q = [pts[slot * 2].to_f64_lossy(), pts[slot * 2 + 1].to_f64_lossy()];
                                e.pred.push([
                                    from_crop(q[0], cfg.train_scale, cfg.crop_size, view.offset[0]),
                                    from_crop(q[1], cfg.train_scale, cfg.crop_size, view.offset[1]),
                                ]);
                                let src = view.frames[(t * view.frames.len() / l).min(view.frames.len() - 1)];
                                let gt = original.point(src, pi);
                                e.gt.push([gt[0] as f64, gt[1] as f64]);
                                let gg = aligned.point(t, pi);
                                e.gt_grid.push([gg[0] as f64, gg[1] as f64]);
                                e.valid.push(aligned.is_valid(t, pi));
                                e.heatmaps.extend(maps[slot * m * n..(slot + 1) * m * n].iter().map(|v| v.to_f64_lossy()));
                            }
                        }
                    }
                }
            }
        }
    }
    let mut reports = Vec::with_capacity(tasks.len());
    for (ti, spec) in tasks.iter().enumerate() {
        let metrics = match spec.kind {
            TaskKind::Classification { num_classes } => {
                let labels: Vec<usize> = samples.iter().map(|s| label_of(s, spec.target)).collect();
                let mh = many_hot.map(|t| ManyHotSpec { classes: t.classes(spec.target) });
                TaskMetrics::Classification(classification_metrics(&logits[ti], num_classes, &labels, mh.as_ref())?)
            }
            TaskKind::Coordinate { .. } => TaskMetrics::Coordinate(coordinate_metrics(&coords[ti], cfg.fov_deg)?),
        };
        reports.push(TaskReport { task: spec.name.clone(), metrics });
    }
    Ok(MetricsReport { split: split.to_string(), tasks: reports })
}

/// Early-stopping score of the main task: Top-1 for classification,
/// negated mean error for coordinates.
pub(crate) fn main_metric(report: &MetricsReport, main_task: &str) -> f64 {
    match report.get(main_task) {
        Some(TaskMetrics::Classification(c)) => c.top1,
        Some(TaskMetrics::Coordinate(c)) => c.mean_normalized_error.map_or(f64::NEG_INFINITY, |e| -e),
        None => f64::NEG_INFINITY,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StepRecord {
    pub kind: &'static str,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochRecord {
    pub kind: &'static str,
    pub epoch: usize,
    pub lr: f64,
    /// Per-task means over the epoch's steps.
    pub train: LossReport,
    pub val: MetricsReport,
    pub main_task: String,
    pub main_metric: f64,
    pub best: bool,
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub best_epoch: usize,
    pub best_metric: f64,
    /// Model and optimizer state at the best epoch.
    pub best_checkpoint: Checkpoint,
    pub epochs: Vec<EpochRecord>,
}

/// Re-estimates BatchNorm statistics with frozen parameters over the first
/// `cfg.bn_recalibration_clips` training clips. At high learning rates the
/// moving averages trail the weights by several steps, enough to wreck
/// eval-mode accuracy.
pub fn recalibrate_bn<T: Scalar>(model: &mut MultitaskModel<T>, train: &[&AnnotatedSample], cfg: &TrainConfig) -> Result<()> {
    let n = cfg.bn_recalibration_clips.min(train.len());
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let batches = train[..n]
        .chunks(cfg.batch_size)
        .map(|c| make_batch::<T>(c, cfg, &mut unused, AugmentMode::Eval).map(|b| b.clips))
        .collect::<Result<Vec<_>>>()?;
    model.recalibrate_bn(batches)
}

/// Seeded shuffle of `0..n` cut into consecutive batches; the last may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn write_line(log: &mut dyn Write, rec: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *log, rec)?;
    log.write_all(b"\n")?;
    Ok(())
}

/// Trains `model` on `train`, evaluating on `val` after every epoch and
/// keeping the checkpoint of the best main-task epoch.
pub fn fit<T: Scalar>(
    model: &mut MultitaskModel<T>,
    train: &[&AnnotatedSample],
    val: &[&AnnotatedSample],
    many_hot: Option<&ManyHotTables>,
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<FitResult> {
    cfg.validate()?;
    if model.tasks().get(&cfg.main_task).is_none() {
        return Err(Error::Config(format!("main task {:?} is not among the model's tasks", cfg.main_task)));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation splits must be non-empty".into()));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    aug_rng.set_stream(2);
    let mut opt = OptimizerState::<T>::new();
    let mut best: Option<(usize, f64, Checkpoint)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let task_names: Vec<String> = model.tasks().tasks().iter().map(|t| t.name.clone()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cyclical_lr(epoch as f64, cfg);
        let batches = epoch_batches(train.len(), cfg.batch_size, &mut shuffle_rng);
        let mut sums = vec![(0.0f64, 0usize); task_names.len()];
        let (mut total_sum, mut steps) = (0.0, 0usize);
        for idx in &batches {
            let chosen: Vec<&AnnotatedSample> = idx.iter().map(|&i| train[i]).collect();
            let batch = make_batch::<T>(&chosen, cfg, &mut aug_rng, AugmentMode::Train)?;
            let mut g = Graph::new();
            let (_, losses) = total_loss(&mut g, model, &batch, Mode::Train, &cfg.coord_loss)?;
            let report = losses.report(&g);
            if !report.is_finite() {
                let detail = serde_json::to_string(&report)?;
                return Err(Error::NonFinite { epoch, step, losses: detail });
            }
            g.backward(losses.total)?;
            model.zero_grads();
            model.collect_grads(&g);
            sgd_nesterov_step(model.params_mut(), &mut opt, lr, cfg.momentum, cfg.weight_decay)?;
            for (k, name) in task_names.iter().enumerate() {
                if let Some(v) = report.get(name) {
                    sums[k].0 += v;
                    sums[k].1 += 1;
                }
            }
            total_sum += report.total;
            steps += 1;
            write_line(log, &StepRecord { kind: "step", epoch, step, lr, losses: report })?;
            step += 1;
        }
        recalibrate_bn(model, train, cfg)?;
        let val_report = evaluate(model, val, cfg, many_hot, "val")?;
        let metric = main_metric(&val_report, &cfg.main_task);
        let improved = best.as_ref().map_or(true, |b| metric > b.1);
        if improved {
            let mut ck = model.to_checkpoint();
            ck.push(BEST_EPOCH_ENTRY, &Tensor::<f32>::scalar(epoch as f32));
            ck.push(BEST_METRIC_ENTRY, &Tensor::<f32>::scalar(metric as f32));
            opt.push_to(&mut ck);
            best = Some((epoch, metric, ck));
        }
        let train_means = LossReport {
            per_task: task_names
                .iter()
                .zip(&sums)
                .filter(|(_, s)| s.1 > 0)
                .map(|(n, s)| (n.clone(), s.0 / s.1 as f64))
                .collect(),
            total: total_sum / steps.max(1) as f64,
            skipped: Vec::new(),
        };
        let rec = EpochRecord {
            kind: "epoch",
            epoch,
            lr,
            train: train_means,
            val: val_report,
            main_task: cfg.main_task.clone(),
            main_metric: metric,
            best: improved,
        };
        write_line(log, &rec)?;
        log.flush()?;
        epochs.push(rec);
    }
    let (best_epoch, best_metric, best_checkpoint) = best.expect("at least one epoch");
    Ok(FitResult { best_epoch, best_metric, best_checkpoint, epochs })
}

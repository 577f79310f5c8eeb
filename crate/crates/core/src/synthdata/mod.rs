//! Deterministic moving-shapes video generator.
//!
//! A clip shows a target object (its noun) moving under a motion pattern (its
//! verb), one or more distractor objects of other nouns moving under other
//! patterns, and two hand markers flanking the target. Gaze follows the target
//! centroid with Gaussian jitter; a fraction of gaze frames is marked invalid.

mod io;
mod render;

pub use io::{read_clip, read_dataset, read_index, write_clip, write_dataset, IndexRecord, INDEX_FILE};
pub use render::{noun_appearance, render_frame, to_pixel, FrameState, ObjectState, Shape};

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dsnt::CoordinateTrack;
use crate::error::{Error, Result};
use crate::model::LabelSpace;

/// Number of distinct motion patterns the renderer knows.
pub const MOTION_PATTERNS: usize = 5;
const MAX_NOUNS: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}; expected train, val or test"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_clips: usize,
    pub frames_per_clip: usize,
    pub frame_size: usize,
    pub num_verbs: usize,
    pub num_nouns: usize,
    /// `(verb, noun)` per action id.
    pub valid_action_pairs: Vec<(usize, usize)>,
    /// Gaze jitter standard deviation per axis, normalized units.
    pub coord_jitter_sigma: f64,
    pub gaze_invalid_fraction: f64,
    pub distractors: usize,
    /// Per-frame pixel noise standard deviation.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_clips: 2000,
            frames_per_clip: 32,
            frame_size: 32,
            num_verbs: 5,
            num_nouns: 6,
            valid_action_pairs: vec![
                (0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3),
                (3, 3), (3, 4), (4, 4), (4, 5), (0, 5), (2, 0),
            ],
            coord_jitter_sigma: 0.05,
            gaze_invalid_fraction: 0.15,
            distractors: 1,
            pixel_noise: 0.03,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.frame_size < 16 {
            return bad(format!("frame_size must be at least 16, got {}", self.frame_size));
        }
        if self.frames_per_clip == 0 || self.num_clips == 0 {
            return bad("num_clips and frames_per_clip must be positive".into());
        }
        if self.num_verbs == 0 || self.num_verbs > MOTION_PATTERNS {
            return bad(format!("num_verbs must be in 1..={MOTION_PATTERNS}, got {}", self.num_verbs));
        }
        if self.num_nouns == 0 || self.num_nouns > MAX_NOUNS {
            return bad(format!("num_nouns must be in 1..={MAX_NOUNS}, got {}", self.num_nouns));
        }
        if self.distractors >= self.num_nouns.max(1) && self.distractors > 0 {
            return bad(format!("{} distractors need more than {} nouns", self.distractors, self.num_nouns));
        }
        if self.valid_action_pairs.is_empty() {
            return bad("valid_action_pairs is empty".into());
        }
        for (i, &(v, n)) in self.valid_action_pairs.iter().enumerate() {
            if v >= self.num_verbs || n >= self.num_nouns {
                return bad(format!("action {i} = ({v}, {n}) is outside the verb/noun ranges"));
            }
            if self.valid_action_pairs[..i].contains(&(v, n)) {
                return bad(format!("action pair ({v}, {n}) is listed twice"));
            }
        }
        for v in 0..self.num_verbs {
            if !self.valid_action_pairs.iter().any(|p| p.0 == v) {
                return bad(format!("verb {v} appears in no action pair"));
            }
        }
        for n in 0..self.num_nouns {
            if !self.valid_action_pairs.iter().any(|p| p.1 == n) {
                return bad(format!("noun {n} appears in no action pair"));
            }
        }
        if !(self.coord_jitter_sigma >= 0.0) || !(0.0..1.0).contains(&self.gaze_invalid_fraction) {
            return bad("jitter sigma must be ≥ 0 and the invalid fraction in [0, 1)".into());
        }
        if !(self.pixel_noise >= 0.0) {
            return bad("pixel_noise must be ≥ 0".into());
        }
        Ok(())
    }

    pub fn label_space(&self) -> LabelSpace {
        LabelSpace { actions: self.valid_action_pairs.len(), verbs: self.num_verbs, nouns: self.num_nouns }
    }

    /// Train/val/test sizes: 70/15/15 with rounding; test takes the remainder.
    pub fn split_sizes(&self) -> [usize; 3] {
        let n = self.num_clips;
        let train = (n as f64 * 0.7).round() as usize;
        let val = ((n as f64 * 0.15).round() as usize).min(n - train);
        [train, val, n - train - val]
    }

    pub fn split_of(&self, index: usize) -> Split {
        let [train, val, _] = self.split_sizes();
        if index < train {
            Split::Train
        } else if index < train + val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// One clip with its labels and coordinate tracks.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    pub clip_id: String,
    pub split: Split,
    /// `T × H × W × 3`, row-major, values in `[0, 1]`.
    pub frames: Vec<f32>,
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
    pub hands: CoordinateTrack,
    pub gaze: CoordinateTrack,
    /// Noise-free target centroid; the reference for the gaze floor.
    pub centroid: CoordinateTrack,
}

impl AnnotatedSample {
    pub fn frame(&self, t: usize) -> &[f32] {
        let sz = self.height * self.width * 3;
        &self.frames[t * sz..(t + 1) * sz]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<AnnotatedSample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&AnnotatedSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn label_space(&self) -> LabelSpace {
        self.config.label_space()
    }
}

/// Centroid of a motion pattern at time `u ∈ [0, 1]`, plus a size multiplier.
#[derive(Clone, Copy, Debug)]
struct Motion {
    verb: usize,
    anchor: [f32; 2],
    amplitude: f32,
    phase: f32,
    direction: f32,
    cycles: f32,
}

impl Motion {
    fn sample(verb: usize, rng: &mut ChaCha8Rng) -> Self {
        let direction = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (anchor, amplitude, cycles) = match verb {
            0 | 1 => ([rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)], rng.gen_range(0.3..0.45), 1.0),
            2 => ([rng.gen_range(-0.3..0.3), rng.gen_range(-0.3..0.3)], rng.gen_range(0.25..0.35), 1.0),
            3 => ([rng.gen_range(-0.55..0.55), rng.gen_range(-0.55..0.55)], 1.0, 1.0),
            _ => ([rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)], rng.gen_range(0.1..0.15), rng.gen_range(3.0..4.0)),
        };
        Motion { verb, anchor, amplitude, phase: rng.gen_range(0.0..2.0 * PI), direction, cycles }
    }

    fn at(&self, u: f32) -> ([f32; 2], f32) {
        let [ax, ay] = self.anchor;
        let s = self.direction * self.amplitude * (2.0 * u - 1.0);
        match self.verb {
            0 => ([ax + s, ay], 1.0),
            1 => ([ax, ay + s], 1.0),
            2 => {
                let a = self.phase + self.direction * 2.0 * PI * u;
                ([ax + self.amplitude * a.cos(), ay + self.amplitude * a.sin()], 1.0)
            }
            // drift halfway toward the center while growing
            3 => ([ax * (1.0 - 0.5 * u), ay * (1.0 - 0.5 * u)], 0.7 + 0.7 * u),
            _ => {
                let a = self.phase + 2.0 * PI * self.cycles * u;
                ([ax + self.amplitude * a.sin(), ay + 0.3 * self.amplitude * (2.0 * a).sin()], 1.0)
            }
        }
    }
}

fn background(size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    // a few soft blobs over a mid-gray base
    let blobs: Vec<([f32; 2], f32, f32)> = (0..4)
        .map(|_| ([rng.gen_range(0.0..size as f32), rng.gen_range(0.0..size as f32)], rng.gen_range(3.0..8.0), rng.gen_range(-0.15..0.15)))
        .collect();
    let tint: [f32; 3] = [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05)];
    let mut img = vec![0.0; size * size * 3];
    for i in 0..size {
        for j in 0..size {
            let mut v = 0.45;
            for (c, r, a) in &blobs {
                let d2 = (j as f32 - c[0]).powi(2) + (i as f32 - c[1]).powi(2);
                v += a * (-d2 / (2.0 * r * r)).exp();
            }
            for ch in 0..3 {
                img[(i * size + j) * 3 + ch] = v + tint[ch];
            }
        }
    }
    img
}

fn clamp_point(p: [f32; 2], lim: f32) -> [f32; 2] {
    [p[0].clamp(-lim, lim), p[1].clamp(-lim, lim)]
}

fn generate_clip(cfg: &SynthConfig, index: usize) -> Result<AnnotatedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let action = rng.gen_range(0..cfg.valid_action_pairs.len());
    let (verb, noun) = cfg.valid_action_pairs[action];
    let size = cfg.frame_size;
    let base_radius = 0.12 * size as f32;

    let target = Motion::sample(verb, &mut rng);
    let mut others: Vec<(usize, Motion)> = Vec::new();
    while others.len() < cfg.distractors {
        let n = rng.gen_range(0..cfg.num_nouns);
        if n == noun || others.iter().any(|o| o.0 == n) {
            continue;
        }
        let v = rng.gen_range(0..cfg.num_verbs);
        others.push((n, Motion::sample(v, &mut rng)));
    }
    let target_on_top = rng.gen_bool(0.5);
    let hand_phase = rng.gen_range(0.0..2.0 * PI);
    let bg = background(size, &mut rng);
    let jitter = Normal::new(0.0, cfg.coord_jitter_sigma.max(0.0)).expect("finite sigma");
    let noise = Normal::new(0.0, cfg.pixel_noise.max(0.0)).expect("finite noise");

    let t_len = cfg.frames_per_clip;
    let mut frames = Vec::with_capacity(t_len * size * size * 3);
    let (mut hands, mut gaze, mut gaze_valid, mut centroid) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for t in 0..t_len {
        let u = if t_len > 1 { t as f32 / (t_len - 1) as f32 } else { 0.5 };
        let (c, scale) = target.at(u);
        let c = clamp_point(c, 0.8);
        let (shape, color) = noun_appearance(noun, cfg.num_nouns);
        let radius = base_radius * scale;
        let target_obj = ObjectState { shape, color, center: c, radius };
        let mut objects: Vec<ObjectState> = others
            .iter()
            .map(|(n, m)| {
                let (oc, os) = m.at(u);
                let (shape, color) = noun_appearance(*n, cfg.num_nouns);
                ObjectState { shape, color, center: clamp_point(oc, 0.8), radius: base_radius * os }
            })
            .collect();
        if target_on_top {
            objects.push(target_obj);
        } else {
            objects.insert(0, target_obj);
        }
        let reach = 2.0 * (radius + 2.5) / size as f32;
        let a = hand_phase + 2.0 * PI * u * 2.0;
        let wobble = 0.06;
        let h = [
            clamp_point([c[0] - reach + wobble * a.sin(), c[1] + 0.5 * reach + wobble * a.cos()], 0.95),
            clamp_point([c[0] + reach + wobble * (a + PI / 2.0).sin(), c[1] + 0.5 * reach + wobble * (a + PI / 2.0).cos()], 0.95),
        ];
        let mut img = render_frame(&FrameState { size, background: &bg, objects, hands: h });
        if cfg.pixel_noise > 0.0 {
            img.iter_mut().for_each(|v| *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0));
        }
        frames.extend(img);
        hands.extend(h);
        let jx = if cfg.coord_jitter_sigma > 0.0 { jitter.sample(&mut rng) as f32 } else { 0.0 };
        let jy = if cfg.coord_jitter_sigma > 0.0 { jitter.sample(&mut rng) as f32 } else { 0.0 };
        gaze.push(clamp_point([c[0] + jx, c[1] + jy], 1.0));
        gaze_valid.push(!rng.gen_bool(cfg.gaze_invalid_fraction));
        centroid.push(c);
    }
    Ok(AnnotatedSample {
        clip_id: format!("clip{index:05}"),
        split: cfg.split_of(index),
        frames,
        num_frames: t_len,
        height: size,
        width: size,
        verb,
        noun,
        action,
        hands: CoordinateTrack::new(2, hands, vec![true; 2 * t_len])?,
        gaze: CoordinateTrack::new(1, gaze, gaze_valid)?,
        centroid: CoordinateTrack::new(1, centroid, vec![true; t_len])?,
    })
}

/// Generates every clip; clip `i` depends only on `(seed, i)`, so the result
/// is independent of the thread count.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let parts = crate::parallel::map_chunks(cfg.num_clips, |r| r.map(|i| generate_clip(cfg, i)).collect::<Result<Vec<_>>>());
    let mut samples = Vec::with_capacity(cfg.num_clips);
    for p in parts {
        samples.extend(p?);
    }
    Ok(Dataset { config: cfg.clone(), samples })
}

/// Expected gaze error of a predictor that knows the true centroid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GazeFloor {
    /// Mean `‖gaze − centroid‖` over valid frames of the given samples.
    pub empirical: f64,
    /// `σ·√(π/2)`, the mean of a 2-D isotropic Gaussian's radius.
    pub theoretical: f64,
}

pub fn gaze_floor(samples: &[&AnnotatedSample], sigma: f64) -> Result<GazeFloor> {
    let (mut sum, mut n) = (0.0, 0usize);
    for s in samples {
        for t in 0..s.gaze.frames() {
            if s.gaze.is_valid(t, 0) {
                let g = s.gaze.point(t, 0);
                let c = s.centroid.point(t, 0);
                sum += ((g[0] - c[0]) as f64).hypot((g[1] - c[1]) as f64);
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::UndefinedMetric("no valid gaze frames for the floor".into()));
    }
    Ok(GazeFloor { empirical: sum / n as f64, theoretical: sigma * std::f64::consts::FRAC_PI_2.sqrt() })
}

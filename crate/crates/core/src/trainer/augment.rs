//! Fused bilinear resize + crop, and the matching coordinate transform.

use rand::Rng;

use super::TrainConfig;
use crate::dsnt::CoordinateTrack;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    /// Random integer crop offset.
    Train,
    /// Exactly centered crop.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    /// Channel-first `[3, T, crop, crop]`.
    pub frames: Vec<f32>,
    /// Inputs remapped to the crop; points outside it are invalid.
    pub tracks: Vec<CoordinateTrack>,
    /// Crop origin `(x, y)` in pixels of the resized frame.
    pub offset: [f64; 2],
}

/// Crop origin within the `train_scale` square.
pub fn crop_offset(cfg: &TrainConfig, mode: AugmentMode, rng: &mut impl Rng) -> Result<[f64; 2]> {
    let (s, c) = (cfg.train_scale, cfg.crop_size);
    if c > s || c == 0 {
        return Err(Error::Config(format!("crop {c} does not fit in the {s}×{s} resized frame")));
    }
    Ok(match mode {
        AugmentMode::Train => [rng.gen_range(0..=s - c) as f64, rng.gen_range(0..=s - c) as f64],
        AugmentMode::Eval => [(s - c) as f64 / 2.0; 2],
    })
}

/// Frame-normalized coordinate → crop-normalized coordinate along one axis.
pub fn to_crop(x: f64, scale: usize, crop: usize, offset: f64) -> f64 {
    ((x + 1.0) / 2.0 * scale as f64 - offset) / crop as f64 * 2.0 - 1.0
}

/// Inverse of [`to_crop`].
pub fn from_crop(x: f64, scale: usize, crop: usize, offset: f64) -> f64 {
    ((x + 1.0) / 2.0 * crop as f64 + offset) / scale as f64 * 2.0 - 1.0
}

/// Source taps `(i0, i1, w1)` for each output pixel along one axis.
fn taps(src: usize, scale: usize, crop: usize, offset: f64) -> Vec<(usize, usize, f32)> {
    (0..crop)
        .map(|j| {
            let s = ((j as f64 + offset + 0.5) * src as f64 / scale as f64 - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Resizes every `H × W × 3` frame to `train_scale²`, crops `crop_size²` at the
/// mode's offset and remaps the coordinate tracks through the same transform.
pub fn augment(
    frames: &[f32],
    dims: [usize; 3],
    tracks: &[&CoordinateTrack],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
    mode: AugmentMode,
) -> Result<Augmented> {
    let [t_len, h, w] = dims;
    if frames.len() != t_len * h * w * 3 {
        return Err(Error::dim("augment", format!("{} values for {t_len}×{h}×{w}×3", frames.len())));
    }
    let offset = crop_offset(cfg, mode, rng)?;
    let (s, c) = (cfg.train_scale, cfg.crop_size);
    let tx = taps(w, s, c, offset[0]);
    let ty = taps(h, s, c, offset[1]);
    let mut out = vec![0.0f32; 3 * t_len * c * c];
    for t in 0..t_len {
        let src = &frames[t * h * w * 3..(t + 1) * h * w * 3];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                for ch in 0..3 {
                    let px = |y: usize, x: usize| src[(y * w + x) * 3 + ch];
                    let top = px(y0, x0) + (px(y0, x1) - px(y0, x0)) * fx;
                    let bot = px(y1, x0) + (px(y1, x1) - px(y1, x0)) * fx;
                    out[((ch * t_len + t) * c + i) * c + j] = top + (bot - top) * fy;
                }
            }
        }
    }
    let mut mapped = Vec::with_capacity(tracks.len());
    for tr in tracks {
        let mut points = Vec::with_capacity(tr.points.len());
        let mut valid = Vec::with_capacity(tr.valid.len());
        for (p, &v) in tr.points.iter().zip(&tr.valid) {
            let q = [
                to_crop(p[0] as f64, s, c, offset[0]) as f32,
                to_crop(p[1] as f64, s, c, offset[1]) as f32,
            ];
            let inside = q[0].abs() <= 1.0 && q[1].abs() <= 1.0;
            points.push(if inside { q } else { [q[0].clamp(-1.0, 1.0), q[1].clamp(-1.0, 1.0)] });
            valid.push(v && inside);
        }
        mapped.push(CoordinateTrack::new(tr.num_points, points, valid)?);
    }
    Ok(Augmented { frames: out, tracks: mapped, offset })
}

//! On-disk dataset layout: `index.jsonl` plus one MTLC tensor file per clip.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedSample, Split};
use crate::checkpoint::ByteReader;
use crate::dsnt::CoordinateTrack;
use crate::error::{Error, Result};

pub const INDEX_FILE: &str = "index.jsonl";
const CLIP_MAGIC: &[u8; 4] = b"MTLC";
const CLIP_VERSION: u32 = 1;

/// One line of `index.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub clip_id: String,
    /// Relative to the dataset directory.
    pub path: String,
    pub verb: usize,
    pub noun: usize,
    pub action: usize,
    /// Per frame, both hands.
    pub hands: Vec<[[f32; 2]; 2]>,
    pub gaze: Vec<[f32; 2]>,
    pub gaze_valid: Vec<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub centroid: Option<Vec<[f32; 2]>>,
    pub split: Split,
}

/// Writes a `T × H × W × C` float clip.
pub fn write_clip(path: &Path, dims: [usize; 4], data: &[f32]) -> Result<()> {
    if dims.iter().product::<usize>() != data.len() {
        return Err(Error::dim("write_clip", format!("dims {dims:?} for {} values", data.len())));
    }
    let mut out = Vec::with_capacity(24 + data.len() * 4);
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::dim("write_clip", format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parses an MTLC file into its dims and row-major `T → H → W → C` values.
pub fn read_clip(bytes: &[u8]) -> Result<([usize; 4], Vec<f32>)> {
    let mut r = ByteReader::new(bytes);
    r.expect_magic(CLIP_MAGIC)?;
    let at = r.offset();
    let version = r.u32()?;
    if version != CLIP_VERSION {
        return Err(Error::Format { offset: at, message: format!("unsupported clip version {version}") });
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        let at = r.offset();
        *d = r.u32()? as usize;
        if *d == 0 {
            return Err(Error::Format { offset: at, message: "zero extent".into() });
        }
    }
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| r.error("size overflow".into()))?;
    let data = r.f32s(n)?;
    if !r.is_done() {
        return Err(r.error("trailing bytes after clip data".into()));
    }
    Ok((dims, data))
}

fn points1(track: &CoordinateTrack) -> Vec<[f32; 2]> {
    (0..track.frames()).map(|t| track.point(t, 0)).collect()
}

/// Writes `clips/<clip_id>.mtlc` for every sample and the index.
pub fn write_dataset(dir: &Path, samples: &[AnnotatedSample]) -> Result<()> {
    fs::create_dir_all(dir.join("clips"))?;
    let mut index = std::io::BufWriter::new(fs::File::create(dir.join(INDEX_FILE))?);
    for s in samples {
        let rel = format!("clips/{}.mtlc", s.clip_id);
        write_clip(&dir.join(&rel), [s.num_frames, s.height, s.width, 3], &s.frames)?;
        let rec = IndexRecord {
            clip_id: s.clip_id.clone(),
            path: rel,
            verb: s.verb,
            noun: s.noun,
            action: s.action,
            hands: (0..s.hands.frames()).map(|t| [s.hands.point(t, 0), s.hands.point(t, 1)]).collect(),
            gaze: points1(&s.gaze),
            gaze_valid: (0..s.gaze.frames()).map(|t| s.gaze.is_valid(t, 0)).collect(),
            centroid: Some(points1(&s.centroid)),
            split: s.split,
        };
        serde_json::to_writer(&mut index, &rec)?;
        index.write_all(b"\n")?;
    }
    index.flush()?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<Vec<IndexRecord>> {
    let f = fs::File::open(dir.join(INDEX_FILE))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

fn sample_from(dir: &Path, rec: IndexRecord) -> Result<AnnotatedSample> {
    let ([t, h, w, c], frames) = read_clip(&fs::read(dir.join(&rec.path))?)?;
    let bad = |m: &str| Error::Config(format!("clip {}: {m}", rec.clip_id));
    if c != 3 {
        return Err(bad("expected 3 channels"));
    }
    if rec.hands.len() != t || rec.gaze.len() != t || rec.gaze_valid.len() != t {
        return Err(bad("track lengths differ from the clip's frame count"));
    }
    let centroid = rec.centroid.clone().unwrap_or_else(|| rec.gaze.clone());
    Ok(AnnotatedSample {
        split: rec.split,
        frames,
        num_frames: t,
        height: h,
        width: w,
        verb: rec.verb,
        noun: rec.noun,
        action: rec.action,
        hands: CoordinateTrack::new(2, rec.hands.iter().flatten().copied().collect(), vec![true; 2 * t])?,
        gaze: CoordinateTrack::new(1, rec.gaze, rec.gaze_valid)?,
        centroid: CoordinateTrack::new(1, centroid, vec![true; t])?,
        clip_id: rec.clip_id,
    })
}

/// Loads every clip listed in the index, optionally restricted to one split.
pub fn read_dataset(dir: &Path, split: Option<Split>) -> Result<Vec<AnnotatedSample>> {
    read_index(dir)?
        .into_iter()
        .filter(|r| split.map_or(true, |s| r.split == s))
        .map(|r| sample_from(dir, r))
        .collect()
}

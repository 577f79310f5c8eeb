//! Flat `key = value` config files with `[section]` headers.
//!
//! ```text
//! seed = 7
//! tasks = A+H+G
//!
//! [synth]
//! num_clips = 2000
//! valid_action_pairs = 0:0, 0:1, 1:1
//!
//! [arch]
//! stages = 16@3x3x3/1x2x2, 32@3x3x3/2x2x2, 64@1x3x3/1x1x1
//! ```
//!
//! `#` starts a comment. Every key is checked against the schema; unknown
//! keys, duplicates and malformed values are errors naming the line.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ArchConfig, StageConfig, TaskSet};
use crate::synthdata::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Task declaration, e.g. `A+H+G`.
    pub tasks: String,
    pub main_task: Option<String>,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub arch: ArchConfig,
    pub dataset_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Exact file contents, kept for manifests.
    pub source: String,
}

struct Entry {
    value: String,
    line: usize,
}

struct Raw {
    entries: BTreeMap<(String, String), Entry>,
}

fn parse_raw(text: &str) -> Result<Raw> {
    let mut entries = BTreeMap::new();
    let mut section = String::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::Config(format!("line {line_no}: unterminated section header")))?;
            section = name.trim().to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
        let key = (section.clone(), k.trim().to_string());
        if key.1.is_empty() {
            return Err(Error::Config(format!("line {line_no}: empty key")));
        }
        if entries.contains_key(&key) {
            return Err(Error::Config(format!("line {line_no}: duplicate key {}", qualified(&key))));
        }
        entries.insert(key, Entry { value: v.trim().to_string(), line: line_no });
    }
    Ok(Raw { entries })
}

fn qualified(key: &(String, String)) -> String {
    if key.0.is_empty() {
        key.1.clone()
    } else {
        format!("{}.{}", key.0, key.1)
    }
}

impl Raw {
    fn take(&mut self, section: &str, key: &str) -> Option<Entry> {
        self.entries.remove(&(section.to_string(), key.to_string()))
    }

    fn parse<T: FromStr>(&mut self, section: &str, key: &str, slot: &mut T) -> Result<()> {
        if let Some(e) = self.take(section, key) {
            *slot = e.value.parse().map_err(|_| {
                Error::Config(format!("line {}: invalid value {:?} for {}", e.line, e.value, qualified(&(section.into(), key.into()))))
            })?;
        }
        Ok(())
    }

    fn with<T>(&mut self, section: &str, key: &str, f: impl FnOnce(&str) -> Result<T>) -> Result<Option<T>> {
        match self.take(section, key) {
            None => Ok(None),
            Some(e) => f(&e.value)
                .map(Some)
                .map_err(|err| Error::Config(format!("line {}: {}: {err}", e.line, qualified(&(section.into(), key.into()))))),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.iter().next() {
            Some((k, e)) => Err(Error::Config(format!("line {}: unknown key {}", e.line, qualified(k)))),
            None => Ok(()),
        }
    }
}

fn parse_triple(s: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!("expected AxBxC, got {s:?}")));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| Error::Config(format!("bad extent {p:?}")))?;
    }
    Ok(out)
}

/// `channels@kernel/stride[+res]`, e.g. `32@3x3x3/2x2x2+res`.
pub fn parse_stage(s: &str) -> Result<StageConfig> {
    let s = s.trim();
    let (s, residual) = match s.strip_suffix("+res") {
        Some(rest) => (rest, true),
        None => (s, false),
    };
    let (ch, rest) = s.split_once('@').ok_or_else(|| Error::Config(format!("stage {s:?} lacks `@`")))?;
    let (k, st) = rest.split_once('/').ok_or_else(|| Error::Config(format!("stage {s:?} lacks `/stride`")))?;
    Ok(StageConfig {
        out_channels: ch.trim().parse().map_err(|_| Error::Config(format!("bad channel count {ch:?}")))?,
        kernel: parse_triple(k)?,
        stride: parse_triple(st)?,
        residual,
    })
}

/// `v:n` pairs separated by commas or whitespace.
pub fn parse_pairs(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            let (v, n) = t.split_once(':').ok_or_else(|| Error::Config(format!("pair {t:?} is not verb:noun")))?;
            let p = |x: &str| x.parse::<usize>().map_err(|_| Error::Config(format!("bad id in pair {t:?}")));
            Ok((p(v)?, p(n)?))
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut raw = parse_raw(text)?;
        let seed = raw
            .with("", "seed", |v| v.parse::<u64>().map_err(|_| Error::Config(format!("bad seed {v:?}"))))?
            .ok_or_else(|| Error::Config("`seed` is mandatory".into()))?;
        let mut tasks = "A".to_string();
        raw.parse("", "tasks", &mut tasks)?;
        let main_task = raw.take("", "main_task").map(|e| e.value);

        let mut synth = SynthConfig { seed, ..SynthConfig::default() };
        raw.parse("synth", "num_clips", &mut synth.num_clips)?;
        raw.parse("synth", "frames_per_clip", &mut synth.frames_per_clip)?;
        raw.parse("synth", "frame_size", &mut synth.frame_size)?;
        raw.parse("synth", "num_verbs", &mut synth.num_verbs)?;
        raw.parse("synth", "num_nouns", &mut synth.num_nouns)?;
        if let Some(p) = raw.with("synth", "valid_action_pairs", parse_pairs)? {
            synth.valid_action_pairs = p;
        }
        raw.parse("synth", "coord_jitter_sigma", &mut synth.coord_jitter_sigma)?;
        raw.parse("synth", "gaze_invalid_fraction", &mut synth.gaze_invalid_fraction)?;
        raw.parse("synth", "distractors", &mut synth.distractors)?;
        raw.parse("synth", "pixel_noise", &mut synth.pixel_noise)?;
        raw.parse("synth", "seed", &mut synth.seed)?;

        let mut train = TrainConfig { seed, ..TrainConfig::default() };
        raw.parse("train", "base_lr", &mut train.base_lr)?;
        raw.parse("train", "max_lr", &mut train.max_lr)?;
        raw.parse("train", "cycle_epochs", &mut train.cycle_epochs)?;
        raw.parse("train", "momentum", &mut train.momentum)?;
        raw.parse("train", "weight_decay", &mut train.weight_decay)?;
        raw.parse("train", "batch_size", &mut train.batch_size)?;
        raw.parse("train", "epochs", &mut train.epochs)?;
        raw.parse("train", "clip_len", &mut train.clip_len)?;
        raw.parse("train", "window_len", &mut train.window_len)?;
        raw.parse("train", "train_scale", &mut train.train_scale)?;
        raw.parse("train", "crop_size", &mut train.crop_size)?;
        raw.parse("train", "bn_recalibration_clips", &mut train.bn_recalibration_clips)?;
        raw.parse("train", "lambda", &mut train.coord_loss.lambda)?;
        if let Some(s) = raw.with("train", "sigma", |v| v.parse::<f64>().map_err(|_| Error::Config(format!("bad sigma {v:?}"))))? {
            train.coord_loss.sigma = Some(s);
        }
        raw.parse("metrics", "fov_deg", &mut train.fov_deg)?;
        raw.parse("metrics", "many_hot_threshold", &mut train.many_hot_threshold)?;

        let mut arch = ArchConfig::desk_default();
        raw.parse("arch", "in_channels", &mut arch.in_channels)?;
        arch.frames = train.clip_len;
        arch.height = train.crop_size;
        arch.width = train.crop_size;
        if let Some(st) = raw.with("arch", "stages", |v| v.split(',').map(parse_stage).collect::<Result<Vec<_>>>())? {
            arch.stages = st;
        }

        let mut dataset = PathBuf::from("dataset");
        let mut out = PathBuf::from("runs");
        raw.parse("paths", "dataset", &mut dataset)?;
        raw.parse("paths", "out", &mut out)?;
        raw.finish()?;

        let labels = synth.label_space();
        let task_set = TaskSet::parse(&tasks, labels, main_task.as_deref())?;
        train.main_task = task_set.main_task().to_string();
        let cfg = RunConfig {
            seed,
            tasks,
            main_task,
            synth,
            train,
            arch,
            dataset_dir: base_dir.join(dataset),
            out_dir: base_dir.join(out),
            source: text.to_string(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        self.arch.feature_shape()?;
        self.task_set()?;
        Ok(())
    }

    pub fn task_set(&self) -> Result<TaskSet> {
        TaskSet::parse(&self.tasks, self.synth.label_space(), self.main_task.as_deref())
    }

    /// Replaces the run seed everywhere it was inherited.
    pub fn override_seed(&mut self, seed: u64) {
        if self.synth.seed == self.seed {
            self.synth.seed = seed;
        }
        self.train.seed = seed;
        self.seed = seed;
    }

    /// Hex SHA-256 of the config text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.source.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

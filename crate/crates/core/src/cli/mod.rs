//! Command implementations behind the `egomtl` binary.

mod config;

pub use config::{parse_pairs, parse_stage, RunConfig};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::checkpoint::Checkpoint;
use crate::dsnt::{dsnt, normalize_heatmap};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::model::{build_model, class_activation_map, export_cam_pgm, HeadOutput, MultitaskModel, TaskKind};
use crate::synthdata::{generate_dataset, read_clip, read_dataset, write_dataset, Split};
use crate::tensor::Tensor;
use crate::trainer::{augment, evaluate, fit, sample_eval_clip, AugmentMode, ManyHotTables};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.mtlw";
pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Written next to every command's outputs.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub threads: usize,
    pub config_sha256: String,
    pub config: String,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, details: serde_json::Value) -> Result<()> {
    let m = Manifest {
        command: command.into(),
        code_version: CODE_VERSION.into(),
        seed: cfg.seed,
        threads: crate::parallel::threads(),
        config_sha256: cfg.hash(),
        config: cfg.source.clone(),
        details,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&m)? + "\n")?;
    Ok(())
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn require_dataset(dir: &Path) -> Result<()> {
    if !dir.join(crate::synthdata::INDEX_FILE).is_file() {
        return Err(Error::Config(format!("no dataset index in {}", dir.display())));
    }
    Ok(())
}

/// Generates the synthetic dataset into `out` (default: the configured dataset directory).
pub fn cmd_synth(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out.map_or_else(|| cfg.dataset_dir.clone(), Path::to_path_buf);
    ensure_dir(&dir)?;
    let ds = generate_dataset(&cfg.synth)?;
    write_dataset(&dir, &ds.samples)?;
    let [train, val, test] = cfg.synth.split_sizes();
    let details = serde_json::json!({
        "synth": cfg.synth,
        "clips": ds.samples.len(),
        "splits": { "train": train, "val": val, "test": test },
    });
    write_manifest(&dir, "synth", cfg, details)?;
    Ok(dir)
}

fn many_hot_tables(cfg: &RunConfig, dataset: &Path) -> Result<ManyHotTables> {
    let train = read_dataset(dataset, Some(Split::Train))?;
    let refs: Vec<_> = train.iter().collect();
    Ok(ManyHotTables::from_samples(
        &refs,
        &cfg.synth.valid_action_pairs,
        cfg.synth.num_verbs,
        cfg.synth.num_nouns,
        cfg.train.many_hot_threshold,
    ))
}

/// Trains on the configured dataset; writes the log, the best checkpoint and a manifest.
pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>) -> Result<PathBuf> {
    require_dataset(&cfg.dataset_dir)?;
    let dir = out.map_or_else(|| cfg.out_dir.clone(), Path::to_path_buf);
    ensure_dir(&dir)?;
    let tasks = cfg.task_set()?;
    let train = read_dataset(&cfg.dataset_dir, Some(Split::Train))?;
    let val = read_dataset(&cfg.dataset_dir, Some(Split::Val))?;
    let (tr, va): (Vec<_>, Vec<_>) = (train.iter().collect(), val.iter().collect());
    let tables = ManyHotTables::from_samples(
        &tr,
        &cfg.synth.valid_action_pairs,
        cfg.synth.num_verbs,
        cfg.synth.num_nouns,
        cfg.train.many_hot_threshold,
    );
    let mut model = build_model::<f32>(&cfg.arch, &tasks, cfg.seed)?;
    let mut log = BufWriter::new(fs::File::create(dir.join(LOG_FILE))?);
    let result = fit(&mut model, &tr, &va, Some(&tables), &cfg.train, &mut log);
    log.flush()?;
    let result = result?;
    result.best_checkpoint.save(&dir.join(BEST_CHECKPOINT))?;
    let details = serde_json::json!({
        "tasks": tasks.label(),
        "best_epoch": result.best_epoch,
        "best_val_metric": result.best_metric,
        "dataset": cfg.dataset_dir,
    });
    write_manifest(&dir, "train", cfg, details)?;
    Ok(dir)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<MultitaskModel<f32>> {
    let mut model = build_model::<f32>(&cfg.arch, &cfg.task_set()?, cfg.seed)?;
    model.load_checkpoint(&Checkpoint::load(checkpoint)?)?;
    Ok(model)
}

/// Evaluates a checkpoint on one split; writes `metrics_<split>.json` and a CSV row per task.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, split: Split, out: Option<&Path>) -> Result<MetricsReport> {
    require_dataset(&cfg.dataset_dir)?;
    let model = load_model(cfg, checkpoint)?;
    let samples = read_dataset(&cfg.dataset_dir, Some(split))?;
    let refs: Vec<_> = samples.iter().collect();
    let tables = many_hot_tables(cfg, &cfg.dataset_dir)?;
    let report = evaluate(&model, &refs, &cfg.train, Some(&tables), split.as_str())?;
    let dir = out.map_or_else(|| cfg.out_dir.clone(), Path::to_path_buf);
    ensure_dir(&dir)?;
    fs::write(dir.join(format!("metrics_{}.json", split.as_str())), report.to_json()? + "\n")?;
    let run = format!("{}:{}", cfg.task_set()?.label(), cfg.seed);
    let mut csv = MetricsReport::csv_header().to_string() + "\n";
    for row in report.csv_rows(&run) {
        csv += &row;
        csv.push('\n');
    }
    fs::write(dir.join(format!("metrics_{}.csv", split.as_str())), csv)?;
    let details = serde_json::json!({ "checkpoint": checkpoint, "split": split.as_str() });
    write_manifest(&dir, "eval", cfg, details)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct PointPrediction {
    pub task: String,
    pub point: usize,
    /// Heatmap frame index.
    pub frame: usize,
    /// Input frame of the clip this heatmap frame is aligned with.
    pub source_frame: usize,
    /// Coordinates in the network's (cropped) view, as produced from the heatmap.
    pub x: f64,
    pub y: f64,
    /// The same point in normalized coordinates of the full clip frame.
    pub frame_x: f64,
    pub frame_y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct HeatmapDump {
    pub task: String,
    pub point: usize,
    pub frame: usize,
    pub m: usize,
    pub n: usize,
    pub values: Vec<f64>,
}

pub struct PredictOptions {
    pub emit_heatmaps: bool,
    pub emit_cam: Option<usize>,
}

/// Runs one MTLC clip through the model; writes `predictions.json` and,
/// on request, heatmap and CAM PGMs.
pub fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    clip_path: &Path,
    opts: &PredictOptions,
    out: Option<&Path>,
) -> Result<Vec<PointPrediction>> {
    let model = load_model(cfg, checkpoint)?;
    let ([t_len, h, w, c], frames) = read_clip(&fs::read(clip_path)?)?;
    if c != 3 {
        return Err(Error::dim("predict", format!("clip has {c} channels, expected 3")));
    }
    let clip_id = clip_path.file_stem().and_then(|s| s.to_str()).unwrap_or("clip").to_string();
    let tc = &cfg.train;
    let sel = sample_eval_clip(t_len, tc.clip_len, tc.window_len);
    let mut raw = Vec::with_capacity(sel.len() * h * w * 3);
    sel.iter().for_each(|&f| raw.extend_from_slice(&frames[f * h * w * 3..(f + 1) * h * w * 3]));
    let aug = augment(&raw, [sel.len(), h, w], &[], tc, &mut ChaCha8Rng::seed_from_u64(0), AugmentMode::Eval)?;
    let dir = out.map_or_else(|| cfg.out_dir.clone(), Path::to_path_buf);
    ensure_dir(&dir)?;

    let mut g = Graph::new();
    let x = g.leaf(Tensor::from_vec(&[1, 3, sel.len(), tc.crop_size, tc.crop_size], aug.frames)?);
    let outputs = model.forward_eval(&mut g, x)?;
    let mut preds = Vec::new();
    let mut dumps = Vec::new();
    for spec in model.tasks().tasks() {
        let Some(HeadOutput::Heatmaps(raw_hm)) = outputs.get(&spec.name) else { continue };
        let hm = normalize_heatmap(&mut g, raw_hm)?;
        let xy = dsnt(&mut g, &hm)?;
        let s = g.shape(hm.values).to_vec();
        let (p, l, m, n) = (s[1], s[2], s[3], s[4]);
        for pi in 0..p {
            for t in 0..l {
                let slot = pi * l + t;
                let (px, py) = (g.value(xy).data()[slot * 2] as f64, g.value(xy).data()[slot * 2 + 1] as f64);
                preds.push(PointPrediction {
                    task: spec.name.clone(),
                    point: pi,
                    frame: t,
                    source_frame: sel[(t * sel.len() / l).min(sel.len() - 1)],
                    x: px,
                    y: py,
                    frame_x: crate::trainer::from_crop(px, tc.train_scale, tc.crop_size, aug.offset[0]),
                    frame_y: crate::trainer::from_crop(py, tc.train_scale, tc.crop_size, aug.offset[1]),
                });
                let values: Vec<f64> = g.value(hm.values).data()[slot * m * n..(slot + 1) * m * n].iter().map(|&v| v as f64).collect();
                if opts.emit_heatmaps {
                    let peak = values.iter().copied().fold(0.0, f64::max);
                    let scaled: Vec<f64> = values.iter().map(|v| if peak > 0.0 { v / peak * 255.0 } else { 0.0 }).collect();
                    crate::pgm::write(&dir.join(format!("{clip_id}_{}_p{pi}_f{t}.pgm", spec.name)), n, m, &scaled)?;
                    dumps.push(HeatmapDump { task: spec.name.clone(), point: pi, frame: t, m, n, values });
                }
            }
        }
    }
    if let Some(class) = opts.emit_cam {
        let head = model
            .heads
            .iter()
            .find(|h| h.name() == model.tasks().main_task() && matches!(h.spec().kind, TaskKind::Classification { .. }))
            .or_else(|| model.heads.iter().find(|h| matches!(h.spec().kind, TaskKind::Classification { .. })))
            .ok_or_else(|| Error::Config("CAM export needs a classification task".into()))?;
        let cam = class_activation_map(g.value(outputs.features), head, class)?;
        let s = cam.shape().to_vec();
        export_cam_pgm(&dir, &clip_id, class, &cam.reshape(&s[1..])?)?;
    }
    fs::write(dir.join("predictions.json"), serde_json::to_string_pretty(&preds)? + "\n")?;
    if opts.emit_heatmaps {
        fs::write(dir.join("heatmaps.json"), serde_json::to_string(&dumps)? + "\n")?;
    }
    let details = serde_json::json!({
        "checkpoint": checkpoint,
        "clip": clip_path,
        "emit_heatmaps": opts.emit_heatmaps,
        "emit_cam": opts.emit_cam,
    });
    write_manifest(&dir, "predict", cfg, details)?;
    Ok(preds)
}
